"""Training and majority-vote inference over whole cases."""
import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers as L
from .checkpoint import load_checkpoint, read_spec, save_checkpoint
from .cloudbuild import (
    DEFAULT_THETA, ProbabilityVolume, cloud_to_volume, extract_patches, point_labels,
    standardize, threshold_to_cloud,
)
from .errors import ConfigError, EmptyCloudError, PcrefineError
from .geometry import augment, normalize_unit_cube, split_subclouds
from .network import NetworkSpec, default_spec, forward, init_model, logits, patch_features
from .optim import AdamState, adam_step
from .tensor import backward

log = logging.getLogger(__name__)


class TrainingError(PcrefineError, RuntimeError):
    pass


@dataclass
class AugmentConfig:
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    rotation: str = "so3"  # or "z"

    def __post_init__(self):
        if self.rotation not in ("so3", "z", "none"):
            raise ConfigError(f"rotation must be so3, z or none, got {self.rotation!r}")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    subcloud_size: int = 2048
    learning_rate: float = 0.01
    theta: float = DEFAULT_THETA
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    spec: NetworkSpec = field(default_factory=default_spec)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.spec, dict):
            self.spec = NetworkSpec.from_dict(self.spec)
        if self.epochs < 0 or self.batch_size < 1 or self.subcloud_size < 1:
            raise ConfigError("epochs must be >= 0 and batch/subcloud sizes positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.subcloud_size != self.spec.input_size:
            raise ConfigError(
                f"subcloud_size {self.subcloud_size} must equal the network input size {self.spec.input_size}")

    def to_dict(self):
        return asdict(self)


@dataclass
class InferenceConfig:
    repetitions: int = 10
    subcloud_size: int = 2048
    tie_rule: str = "mean-probability"
    theta: float = DEFAULT_THETA
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.tie_rule != "mean-probability":
            raise ConfigError(f"unknown tie rule {self.tie_rule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class PreparedCase:
    """A case turned into network inputs once; reused every epoch."""
    cloud: object
    unit_points: np.ndarray
    patches: np.ndarray
    labels: np.ndarray = None


def prepare_case(volume, theta, patch_size, ground_truth=None):
    cloud = threshold_to_cloud(volume, theta)
    std = standardize(volume)
    patches = extract_patches(std, cloud, patch_size).patches
    unit, _ = normalize_unit_cube(cloud)
    labels = None if ground_truth is None else point_labels(cloud, ground_truth)
    return PreparedCase(cloud, unit.points, patches, labels)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    point_accuracy: float
    seconds: float

    def line(self):
        # wall time stays out of the file so identical runs give identical logs
        return f"{self.epoch},{self.mean_loss!r},{self.point_accuracy!r}"


@dataclass
class TrainResult:
    model: object
    log: list
    warnings: list


def _as_volume(v):
    return v if isinstance(v, ProbabilityVolume) else ProbabilityVolume(v)


def train(dataset, config, model=None, log_path=None, checkpoint_path=None, progress=None):
    """Fit the network on ``dataset``, a list of (ProbabilityVolume, label volume) pairs.

    Each epoch visits cases in a seeded random order, cuts every case cloud
    into augmented subclouds and runs Adam on batches of ``batch_size``.
    """
    spec = config.spec
    model = model or init_model(spec, config.seed)
    rng = np.random.default_rng(config.seed)
    warnings = []
    cases = []
    for i, (vol, gt) in enumerate(dataset):
        vol = _as_volume(vol)
        if vol.shape != np.shape(gt):
            raise ConfigError(f"case {i}: ground truth shape {np.shape(gt)} != volume shape {vol.shape}")
        try:
            cases.append(prepare_case(vol, config.theta, spec.patch_size, np.asarray(gt)))
        except EmptyCloudError as exc:
            msg = f"case {i} skipped: {exc}"
            log.warning(msg)
            warnings.append(msg)
    adam = AdamState(learning_rate=config.learning_rate)
    aug = config.augment
    records = []
    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write("epoch,mean_loss,point_accuracy\n")
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            subs = []
            for ci in rng.permutation(len(cases)):
                case = cases[ci]
                for sub in split_subclouds(case.cloud, config.subcloud_size, rng, "train"):
                    src = sub.source_indices
                    pts = case.unit_points[src]
                    if aug.rotation != "none" or aug.jitter_sigma > 0:
                        pts = _augment_points(pts, rng, aug)
                    subs.append((pts, case.patches[src], case.labels[src]))
            loss_sum = correct = seen = 0.0
            for b0 in range(0, len(subs), config.batch_size):
                batch = subs[b0:b0 + config.batch_size]
                pts = np.stack([s[0] for s in batch])
                pat = np.stack([s[1] for s in batch])
                lab = np.concatenate([s[2] for s in batch])
                model.zero_grad()
                lg = logits(model, pts, pat, train=True, rng=rng, seed=config.seed)
                lg2 = lg.reshape(-1, spec.num_classes)
                loss = L.softmax_cross_entropy(lg2, lab)
                val = loss.item()
                if not math.isfinite(val):
                    raise TrainingError(f"non-finite loss {val} at epoch {epoch}, batch {b0 // config.batch_size}")
                backward(loss)
                adam_step(model.params, adam)
                loss_sum += val * len(lab)
                correct += float(np.sum(lg2.data.argmax(axis=1) == lab))
                seen += len(lab)
            rec = EpochRecord(epoch, loss_sum / max(seen, 1), correct / max(seen, 1), time.perf_counter() - t0)
            records.append(rec)
            if log_fh:
                log_fh.write(rec.line() + "\n")
                log_fh.flush()
            if progress:
                progress(rec)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_model(checkpoint_path, model)
    return TrainResult(model, records, warnings)


def save_model(path, model):
    save_checkpoint(path, model.param_arrays(), model.state_arrays(), model.spec.to_dict())


def load_model(path, spec=None):
    """Rebuild a model from a checkpoint; ``spec`` is needed only if the file lacks one."""
    stored = read_spec(path)
    if stored is not None:
        spec = NetworkSpec.from_dict(stored)
    elif spec is None:
        raise ConfigError(f"{path} carries no network spec; pass one explicitly")
    params, state = load_checkpoint(path)
    model = init_model(spec, 0)
    model.load_arrays(params, state)
    return model


def _augment_points(pts, rng, aug):
    from .geometry import PointCloud

    rot = np.eye(3) if aug.rotation == "none" else None
    out = augment(PointCloud(pts, "unit_cube"), rng, aug.jitter_sigma, aug.jitter_clip,
                  rotation=rot, axis_only=aug.rotation == "z")
    return out.points


@dataclass
class InferenceResult:
    cloud: object
    segmentation: np.ndarray
    votes: np.ndarray
    mean_probability: np.ndarray
    warnings: list = field(default_factory=list)


def classify_subclouds(model, unit_points, features, subclouds, batch_size, seed):
    """Mean foreground probability per point over the given subclouds (NaN where unseen).

    ``features`` are the per-point eval-mode patch features of the whole cloud.
    """
    n = len(unit_points)
    psum = np.zeros(n)
    count = np.zeros(n)
    for b0 in range(0, len(subclouds), batch_size):
        idx = np.stack([s.source_indices for s in subclouds[b0:b0 + batch_size]])
        prob = forward(model, unit_points[idx], None, train=False, seed=seed, features=features[idx]).data[..., 1]
        np.add.at(psum, idx.ravel(), prob.ravel())
        np.add.at(count, idx.ravel(), 1.0)
    with np.errstate(invalid="ignore"):
        return psum / count


def vote(votes, prob_sum, repetitions):
    """Majority of per-repetition votes; exact ties go to mean probability >= 0.5."""
    fg = 2 * votes > repetitions
    tie = 2 * votes == repetitions
    return (fg | (tie & (prob_sum / repetitions >= 0.5))).astype(np.int64)


def infer(volume, model, config):
    """Label every cloud point by majority over ``config.repetitions`` cover passes."""
    volume = _as_volume(volume)
    if config.subcloud_size != model.spec.input_size:
        raise ConfigError(f"subcloud_size {config.subcloud_size} != network input size {model.spec.input_size}")
    try:
        case = prepare_case(volume, config.theta, model.spec.patch_size)
    except EmptyCloudError as exc:
        msg = f"nothing to refine: {exc}"
        log.warning(msg)
        return InferenceResult(None, np.zeros(volume.shape, dtype=np.uint8), np.zeros(0), np.zeros(0), [msg])
    rng = np.random.default_rng(config.seed)
    n = len(case.cloud)
    votes = np.zeros(n)
    prob_sum = np.zeros(n)
    # patch features do not depend on the subcloud, so compute them once per case
    feats = patch_features(model, case.patches)
    for _ in range(config.repetitions):
        subs = split_subclouds(case.cloud, config.subcloud_size, rng, "cover")
        p = classify_subclouds(model, case.unit_points, feats, subs, config.batch_size, config.seed)
        votes += p > 0.5
        prob_sum += p
    labels = vote(votes, prob_sum, config.repetitions)
    cloud = case.cloud.with_labels(labels)
    seg = cloud_to_volume(cloud, volume.shape)
    return InferenceResult(cloud, seg, votes, prob_sum / config.repetitions)


def refine_case(volume, ground_truth, model, config):
    """Refine one case and score both the refined and the thresholded input against ground truth."""
    from .metrics import segmentation_report

    volume = _as_volume(volume)
    res = infer(volume, model, config)
    gt = np.asarray(ground_truth) > 0
    thresholded = volume.values > config.theta
    report = segmentation_report(res.segmentation, gt, volume.spacing, cloud_mask=thresholded)
    report.input = segmentation_report(thresholded.astype(np.uint8), gt, volume.spacing)
    report.inference = res
    return report

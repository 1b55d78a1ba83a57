"""X-Conv encoder-decoder point network with a 3-D patch feature extractor.

Point features live channels-last as ``[B, N, C]`` tensors.  Sampling
decisions inside the network (the first farthest-point pick, dilated
neighbor selection) are keyed on a hash of the sampling seed, the layer
and point coordinates, never on point order, so a forward pass is a
deterministic function of the point *set*.
"""
from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers as L
from .errors import ConfigError, DimensionError, InsufficientPointsError
from .geometry import farthest_point_sample_batch, nearest_sorted
from .layers import gather_rows
from .tensor import Tensor, concat, matmul, reshape

PATCH_CHANNELS = (4, 8)


@dataclass(frozen=True)
class XConvLayerSpec:
    n_out: int
    k: int
    d: int
    c_out: int
    c_delta: int

    def __post_init__(self):
        if min(self.n_out, self.k, self.d, self.c_out, self.c_delta) < 1:
            raise ConfigError(f"X-Conv layer values must all be >= 1: {self}")


@dataclass(frozen=True)
class NetworkSpec:
    encoder: tuple
    decoder: tuple
    fc_widths: tuple = (128, 2)
    patch_size: int = 5
    dropout_rate: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        enc = tuple(x if isinstance(x, XConvLayerSpec) else XConvLayerSpec(*x) for x in self.encoder)
        dec = tuple(x if isinstance(x, XConvLayerSpec) else XConvLayerSpec(*x) for x in self.decoder)
        object.__setattr__(self, "encoder", enc)
        object.__setattr__(self, "decoder", dec)
        object.__setattr__(self, "fc_widths", tuple(self.fc_widths))
        if not enc:
            raise ConfigError("network needs at least one encoder layer")
        sizes = [e.n_out for e in enc]
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"encoder point counts must not increase: {sizes}")
        if len(dec) != len(enc) - 1:
            raise ConfigError(f"need {len(enc) - 1} decoder layers to mirror {len(enc)} encoder layers, got {len(dec)}")
        for j, layer in enumerate(dec):
            target = enc[len(enc) - 2 - j].n_out
            if layer.n_out != target:
                raise ConfigError(f"decoder layer {j} has n_out {layer.n_out}, matching encoder stage has {target}")
        if len(self.fc_widths) != 2 or self.fc_widths[-1] != self.num_classes:
            raise ConfigError("fc_widths must be two widths ending in num_classes")
        if self.patch_size < 3 or self.patch_size % 2 != 1:
            raise ConfigError("patch_size must be odd and >= 3")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        # each X-Conv must find d*k neighbors in the cloud it reads from
        level = [self.input_size] + sizes
        for i, e in enumerate(enc):
            if e.k * e.d > level[i]:
                raise ConfigError(f"encoder layer {i} needs {e.k * e.d} neighbors but input has {level[i]} points")
        src = sizes[-1]
        for j, layer in enumerate(dec):
            if layer.k * layer.d > src:
                raise ConfigError(f"decoder layer {j} needs {layer.k * layer.d} neighbors but input has {src} points")
            src = layer.n_out

    @property
    def input_size(self):
        return self.encoder[0].n_out

    @property
    def patch_features(self):
        return PATCH_CHANNELS[-1] * (self.patch_size // 2) ** 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=tuple(XConvLayerSpec(**e) for e in d["encoder"]),
            decoder=tuple(XConvLayerSpec(**e) for e in d["decoder"]),
            fc_widths=tuple(d["fc_widths"]),
            patch_size=d["patch_size"],
            dropout_rate=d["dropout_rate"],
            num_classes=d["num_classes"],
        )


def default_spec():
    return NetworkSpec(
        encoder=((2048, 8, 1, 64, 16), (768, 12, 2, 96, 24), (384, 16, 2, 128, 32), (128, 16, 3, 160, 40)),
        decoder=((384, 16, 2, 128, 32), (768, 12, 2, 96, 24), (2048, 8, 1, 64, 16)),
        fc_widths=(128, 2),
        dropout_rate=0.5,
    )


def reduced_spec():
    """Desk-scale architecture: 512 input points, two encoder stages."""
    return NetworkSpec(
        encoder=((512, 8, 1, 32, 16), (128, 12, 4, 64, 16)),
        decoder=((512, 8, 1, 32, 16),),
        fc_widths=(64, 2),
        dropout_rate=0.5,
    )


def tiny_spec(n=64):
    """Small network for gradient checks and property tests."""
    return NetworkSpec(
        encoder=((n, 4, 1, 6, 3), (n // 4, 4, 2, 8, 3)),
        decoder=((n, 4, 1, 6, 3),),
        fc_widths=(8, 2),
        dropout_rate=0.0,
    )


# parameters -----------------------------------------------------------------

@dataclass
class Model:
    spec: NetworkSpec
    params: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        out = {}
        for name, st in self.bn.items():
            if st.populated:
                out[f"{name}.running_mean"] = st.running_mean
                out[f"{name}.running_var"] = st.running_var
        return out

    def param_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, params, state=None):
        if set(params) != set(self.params):
            extra = sorted(set(params) ^ set(self.params))[:5]
            raise ConfigError(f"checkpoint parameters do not match the network spec: {extra}")
        for k, v in params.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"parameter {k}: checkpoint shape {v.shape} != spec shape {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
        for name, st in self.bn.items():
            st.running_mean = st.running_var = None
            if state and f"{name}.running_mean" in state:
                st.running_mean = np.array(state[f"{name}.running_mean"])
                st.running_var = np.array(state[f"{name}.running_var"])

    def copy(self):
        other = Model(self.spec)
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        other.bn = {k: L.BatchNormState(v.channels,
                                        None if v.running_mean is None else v.running_mean.copy(),
                                        None if v.running_var is None else v.running_var.copy())
                    for k, v in self.bn.items()}
        return other


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def xconv_channels(spec):
    """Input feature channels of every encoder and decoder layer."""
    enc_in = [spec.patch_features] + [e.c_out for e in spec.encoder[:-1]]
    dec_in = []
    cur = spec.encoder[-1].c_out
    for j, layer in enumerate(spec.decoder):
        dec_in.append(cur)
        cur = layer.c_out + spec.encoder[len(spec.encoder) - 2 - j].c_out
    return enc_in, dec_in, cur


def init_model(spec, seed=0):
    """Glorot-uniform weights, zero biases, unit/zero batch-norm affine."""
    rng = np.random.default_rng(seed)
    m = Model(spec)

    def dense_p(name, cin, cout):
        m.params[f"{name}.w"] = Tensor(_glorot(rng, (cin, cout), cin, cout), True, f"{name}.w")
        m.params[f"{name}.b"] = Tensor(np.zeros(cout), True, f"{name}.b")

    def bn_p(name, c):
        m.params[f"{name}.gamma"] = Tensor(np.ones(c), True, f"{name}.gamma")
        m.params[f"{name}.beta"] = Tensor(np.zeros(c), True, f"{name}.beta")
        m.bn[name] = L.BatchNormState(c)

    cin = 1
    for i, cout in enumerate(PATCH_CHANNELS, start=1):
        m.params[f"fe.conv{i}.w"] = Tensor(
            _glorot(rng, (cout, cin, 3, 3, 3), cin * 27, cout * 27), True, f"fe.conv{i}.w")
        m.params[f"fe.conv{i}.b"] = Tensor(np.zeros(cout), True, f"fe.conv{i}.b")
        bn_p(f"fe.bn{i}", cout)
        cin = cout

    def xconv_p(name, layer, c_in):
        cd, k = layer.c_delta, layer.k
        dense_p(f"{name}.lift1", 3, cd)
        dense_p(f"{name}.lift2", cd, cd)
        dense_p(f"{name}.xt1", 3 * k, k * k)
        dense_p(f"{name}.xt2", k * k, k * k)
        dense_p(f"{name}.out", k * (cd + c_in), layer.c_out)
        bn_p(f"{name}.bn", layer.c_out)

    enc_in, dec_in, final = xconv_channels(spec)
    for i, (layer, c) in enumerate(zip(spec.encoder, enc_in)):
        xconv_p(f"enc{i}", layer, c)
    for j, (layer, c) in enumerate(zip(spec.decoder, dec_in)):
        xconv_p(f"dec{j}", layer, c)
    dense_p("fc1", final, spec.fc_widths[0])
    dense_p("fc2", spec.fc_widths[0], spec.fc_widths[1])
    return m


# coordinate-keyed sampling --------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = 0x9E3779B97F4A7C15


def _mix(x):
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def coordinate_keys(coords, seed, layer):
    """Pseudo-random uint64 key per coordinate triple, fixed by (seed, layer, coordinates)."""
    c = np.ascontiguousarray(coords, dtype=np.float64) + 0.0  # folds -0.0 into +0.0
    bits = c.view(np.uint64)
    salt = np.uint64((int(seed) * _GOLD + (int(layer) + 1) * 0x632BE59BD9B4E019) & (2**64 - 1))
    h = _mix(bits[..., 0] ^ salt)
    h = _mix(h ^ bits[..., 1])
    return _mix(h ^ bits[..., 2])


def sample_representatives(points, m, seed, layer):
    """FPS of ``m`` points per batch element, starting at the smallest coordinate key."""
    first = np.argmin(coordinate_keys(points, seed, layer), axis=1)
    return farthest_point_sample_batch(points, m, first)


def dilated_neighbors(reps, points, k, d, seed, layer):
    """Neighbor indices ``[B, M, k]``: k of the d*k nearest, picked by offset keys."""
    B, n = points.shape[:2]
    need = k * d
    if need > n:
        raise InsufficientPointsError(need, n)
    out = np.empty(reps.shape[:2] + (k,), dtype=np.int64)
    for b in range(B):
        near = nearest_sorted(reps[b], points[b], need)
        if d == 1:
            out[b] = near
            continue
        offsets = points[b][near] - reps[b][:, None, :]
        keys = coordinate_keys(offsets, seed, layer)
        pick = np.sort(np.argsort(keys, axis=1, kind="stable")[:, :k], axis=1)
        out[b] = np.take_along_axis(near, pick, axis=1)
    return out


# layers ---------------------------------------------------------------------

def xconv(model, name, layer, reps, points, feats, train, seed=0, layer_index=0, neighbors=None):
    """One X-Conv: ``[B, N, C_in]`` features at ``points`` -> ``[B, M, C_out]`` at ``reps``.

    Neighbors are localized around each representative, lifted by a
    two-layer ELU network and concatenated with the gathered input
    features; a K x K transform predicted from the local coordinates
    mixes them before the output dense + ELU + batch norm.
    """
    P = model.params
    reps = np.asarray(reps, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if reps.ndim == 2:
        reps, points = reps[None], points[None]
        feats = reshape(feats, (1,) + feats.shape)
        out = xconv(model, name, layer, reps, points, feats, train, seed, layer_index, neighbors)
        return reshape(out, out.shape[1:])
    B, M = reps.shape[:2]
    K = layer.k
    if feats.shape[:2] != points.shape[:2]:
        raise DimensionError(f"{name}: features {feats.shape} do not align with points {points.shape}")
    nbr = dilated_neighbors(reps, points, K, layer.d, seed, layer_index) if neighbors is None else neighbors
    local = points[np.arange(B)[:, None, None], nbr] - reps[:, :, None, :]
    local_t = Tensor(local)
    f_delta = L.elu(L.dense(L.elu(L.dense(local_t, P[f"{name}.lift1.w"], P[f"{name}.lift1.b"])),
                            P[f"{name}.lift2.w"], P[f"{name}.lift2.b"]))
    f_star = concat([f_delta, gather_rows(feats, nbr)], axis=-1)
    flat = Tensor(local.reshape(B, M, K * 3))
    x = L.elu(L.dense(flat, P[f"{name}.xt1.w"], P[f"{name}.xt1.b"]))
    x = L.dense(x, P[f"{name}.xt2.w"], P[f"{name}.xt2.b"])
    x = reshape(x, (B, M, K, K))
    fx = matmul(x, f_star)
    fx = reshape(fx, (B, M, K * f_star.shape[-1]))
    out = L.elu(L.dense(fx, P[f"{name}.out.w"], P[f"{name}.out.b"]))
    return L.batch_norm(out, P[f"{name}.bn.gamma"], P[f"{name}.bn.beta"], model.bn[f"{name}.bn"], train)


def feature_extractor(model, patches, train):
    """``[B, s, s, s]`` patches -> ``[B, 64]`` features (for s = 5).

    Two same-padded 3x3x3 convolutions (4 then 8 channels), each followed by
    ReLU and batch norm, then one 2x2x2 max pool and a flatten.
    """
    P = model.params
    s = model.spec.patch_size
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or patches.shape[1:] != (s, s, s):
        raise DimensionError(f"patches must be [B, {s}, {s}, {s}], got {patches.shape}")
    h = Tensor(patches[:, None])
    for i in range(1, len(PATCH_CHANNELS) + 1):
        h = L.conv3d(h, P[f"fe.conv{i}.w"], P[f"fe.conv{i}.b"], pad=1)
        h = L.relu(h)
        h = L.batch_norm(h, P[f"fe.bn{i}.gamma"], P[f"fe.bn{i}.beta"], model.bn[f"fe.bn{i}"], train, axis=1)
    h = L.max_pool3d(h, 2, 2)
    return reshape(h, (patches.shape[0], -1))


def logits(model, points, patches, train=False, rng=None, seed=0, features=None):
    """Per-point class scores ``[B, N, classes]`` for unit-cube ``points [B, N, 3]``.

    ``features`` may carry precomputed eval-mode patch features ``[B, N, F]``
    in place of ``patches`` (pass ``patches=None``).
    """
    spec = model.spec
    points = np.asarray(points, dtype=np.float64)
    given = patches if features is None else features
    given = np.asarray(given, dtype=np.float64)
    single = points.ndim == 2
    if single:
        points, given = points[None], given[None]
    B, N = points.shape[:2]
    if N != spec.input_size:
        raise ConfigError(f"network expects {spec.input_size} points per cloud, got {N}")
    if given.shape[:2] != (B, N):
        raise DimensionError(f"patches {given.shape[:2]} do not align with points {(B, N)}")
    if features is None:
        feats = feature_extractor(model, given.reshape((B * N,) + given.shape[2:]), train)
        feats = reshape(feats, (B, N, -1))
    else:
        if train:
            raise ConfigError("precomputed features are for eval mode only")
        feats = Tensor(given)

    level_pts, level_feats = [points], [feats]
    for i, layer in enumerate(spec.encoder):
        src = level_pts[-1]
        if layer.n_out == src.shape[1]:
            reps = src
        else:
            idx = sample_representatives(src, layer.n_out, seed, i)
            reps = np.take_along_axis(src, idx[..., None], axis=1)
        f = xconv(model, f"enc{i}", layer, reps, src, level_feats[-1], train, seed, i)
        level_pts.append(reps)
        level_feats.append(f)

    E = len(spec.encoder)
    cur_pts, cur_feats = level_pts[-1], level_feats[-1]
    for j, layer in enumerate(spec.decoder):
        t = E - 1 - j
        reps = level_pts[t]
        f = xconv(model, f"dec{j}", layer, reps, cur_pts, cur_feats, train, seed, E + j)
        cur_pts, cur_feats = reps, concat([f, level_feats[t]], axis=-1)

    h = L.relu(L.dense(cur_feats, model.params["fc1.w"], model.params["fc1.b"]))
    if train and spec.dropout_rate > 0:
        h = L.dropout(h, spec.dropout_rate, rng if rng is not None else np.random.default_rng(seed), True)
    out = L.dense(h, model.params["fc2.w"], model.params["fc2.b"])
    return reshape(out, out.shape[1:]) if single else out


def forward(model, points, patches, train=False, rng=None, seed=0, features=None):
    """Per-point class probabilities (softmax over the last axis)."""
    return L.softmax(logits(model, points, patches, train, rng, seed, features), axis=-1)


def patch_features(model, patches, chunk=4096):
    """Eval-mode feature-extractor output for every patch, ``[N, F]``."""
    out = [feature_extractor(model, patches[i:i + chunk], False).data for i in range(0, len(patches), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.patch_features))

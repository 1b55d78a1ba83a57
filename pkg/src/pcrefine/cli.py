"""Command-line entry point: ``pcrefine <command> ...``.

Every command writes a ``manifest.json`` next to its outputs holding the
fully resolved configuration, the sha256 of each input and output file and
a digest of that content.  Manifests carry no wall-clock time, so repeated
runs with the same inputs and flags produce identical directories.

Numerical modules are imported only after ``--threads`` has been applied
to the BLAS thread environment variables.
"""
import argparse
import hashlib
import json
import os
import sys
import time

from . import __version__

# grid defaults, repeated here so the parser does not pull in numpy
FP_SPANS = tuple(range(1, 22, 2))
PROBABILITY_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CliError(Exception):
    pass


# config file ----------------------------------------------------------------

def _parse_value(raw):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def read_config(path):
    """Flat ``key = value`` file; ``#`` comments and ``[section]`` lines are ignored.

    Keys use the long flag names with ``-`` or ``_`` (``batch-size = 8``).
    """
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = _parse_value(val)
    return out


# manifests ------------------------------------------------------------------

def write_manifest(out_dir, command, config, inputs=(), outputs=()):
    from .cloudbuild import file_digest

    body = {
        "command": command,
        "pcrefine_version": __version__,
        "config": config,
        "inputs": {os.fspath(p): file_digest(p) for p in inputs},
        "outputs": {os.path.relpath(p, out_dir): file_digest(p) for p in outputs},
    }
    text = json.dumps(body, sort_keys=True, indent=2)
    doc = {"manifest": body, "manifest_sha256": hashlib.sha256(text.encode()).hexdigest()}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable")
    return path


def _note(msg):
    print(msg, file=sys.stderr)


# synth ----------------------------------------------------------------------

def _save_case(d, vol, gt):
    from .cloudbuild import save_volume

    os.makedirs(d, exist_ok=True)
    prob, truth = os.path.join(d, "prob.f64"), os.path.join(d, "truth.f64")
    save_volume(prob, vol.values, vol.spacing)
    save_volume(truth, gt, vol.spacing)
    return [prob, prob[:-4] + ".meta", truth, truth[:-4] + ".meta"]


def cmd_synth(a):
    from dataclasses import asdict

    from .synth import SyntheticSpec, generate_corpus, generate_nerve

    out = _outdir(a.out)
    files = []
    if a.corpus:
        cases = generate_corpus(a.corpus, a.seed)
        specs = []
        for i, (vol, gt, spec) in enumerate(cases):
            files += _save_case(os.path.join(out, f"case_{i:03d}"), vol, gt)
            specs.append(asdict(spec))
        config = {"corpus": a.corpus, "seed": a.seed, "cases": specs}
    else:
        spec = SyntheticSpec(kind=a.kind, q=a.q, fp_span=a.fp_span, fp_q=a.fp_q)
        vol, gt = generate_nerve(spec)
        files += _save_case(out, vol, gt)
        config = {"seed": a.seed, "spec": asdict(spec)}
    write_manifest(out, "synth", config, outputs=files)
    _note(f"wrote {len(files) // 4} case(s) to {out}")


# train ----------------------------------------------------------------------

def _corpus_cases(root):
    from .cloudbuild import load_probability_volume, load_volume

    if not os.path.isdir(root):
        raise CliError(f"corpus directory {root} does not exist")
    dirs = sorted(d for d in os.listdir(root) if os.path.isfile(os.path.join(root, d, "prob.f64")))
    if not dirs and os.path.isfile(os.path.join(root, "prob.f64")):
        dirs = ["."]
    if not dirs:
        raise CliError(f"{root} holds no cases (expected <case>/prob.f64 and <case>/truth.f64)")
    data, inputs = [], []
    for d in dirs:
        prob, truth = os.path.join(root, d, "prob.f64"), os.path.join(root, d, "truth.f64")
        if not os.path.isfile(truth):
            raise CliError(f"case {d} has no truth.f64")
        data.append((load_probability_volume(prob), load_volume(truth)[0]))
        inputs += [prob, truth]
    return data, inputs


def cmd_train(a):
    from .network import default_spec, reduced_spec
    from .pipeline import AugmentConfig, TrainConfig, train

    spec = reduced_spec() if a.reduced_spec else default_spec()
    cfg = TrainConfig(
        epochs=a.epochs, batch_size=a.batch_size, subcloud_size=a.subcloud_size or spec.input_size,
        learning_rate=a.lr, theta=a.theta, seed=a.seed,
        augment=AugmentConfig(a.jitter_sigma, a.jitter_clip, a.rotation), spec=spec,
    )
    data, inputs = _corpus_cases(a.corpus)
    out = _outdir(a.out)
    ckpt, logf = os.path.join(out, "model.ckpt"), os.path.join(out, "train_log.csv")
    res = train(data, cfg, log_path=logf, checkpoint_path=ckpt,
                progress=lambda r: _note(f"epoch {r.epoch}: loss {r.mean_loss:.4f} acc {r.point_accuracy:.4f}"))
    for w in res.warnings:
        _note(f"warning: {w}")
    config = cfg.to_dict()
    write_manifest(out, "train", config, inputs, [ckpt, logf])


# infer / eval ---------------------------------------------------------------

def _load_model(path):
    from .pipeline import load_model

    if not os.path.isfile(path):
        raise CliError(f"checkpoint {path} does not exist")
    return load_model(path)


def _infer_config(a, model):
    from .pipeline import InferenceConfig

    return InferenceConfig(repetitions=a.repetitions, subcloud_size=model.spec.input_size, theta=a.theta,
                           batch_size=a.batch_size, seed=a.seed)


def cmd_infer(a):
    from .cloudbuild import load_probability_volume, save_volume
    from .geometry import write_csv
    from .pipeline import infer

    model = _load_model(a.checkpoint)
    cfg = _infer_config(a, model)
    vol = load_probability_volume(a.volume)
    out = _outdir(a.out)
    res = infer(vol, model, cfg)
    for w in res.warnings:
        _note(f"warning: {w}")
    seg = os.path.join(out, "refined.f64")
    save_volume(seg, res.segmentation, vol.spacing)
    files = [seg, seg[:-4] + ".meta"]
    if res.cloud is not None:
        cloud = os.path.join(out, "cloud.csv")
        write_csv(cloud, res.cloud)
        files.append(cloud)
    write_manifest(out, "infer", cfg.to_dict(), [a.checkpoint, a.volume], files)


def cmd_eval(a):
    import csv

    from .cloudbuild import load_volume
    from .metrics import segmentation_report

    pred, _ = load_volume(a.pred)
    truth, spacing = load_volume(a.truth)
    if pred.shape != truth.shape:
        raise CliError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    cloud = None
    if a.volume:
        cloud = load_volume(a.volume)[0] > a.theta
    rep = segmentation_report(pred > 0.5, truth > 0.5, spacing, cloud)
    row = rep.row()
    out_file = a.out
    _outdir(os.path.dirname(os.path.abspath(out_file)))
    with open(out_file, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow(list(row.values()))
    inputs = [a.pred, a.truth] + ([a.volume] if a.volume else [])
    write_manifest(os.path.dirname(os.path.abspath(out_file)), "eval",
                   {"theta": a.theta, "spacing": list(spacing)}, inputs, [out_file])


# experiments ----------------------------------------------------------------

def cmd_prob_sweep(a):
    from .experiments import experiment_probability_sweep, write_sweep_csv

    model = _load_model(a.checkpoint)
    cfg = _infer_config(a, model)
    out = _outdir(a.out)
    rows = experiment_probability_sweep(model, a.seed, cfg)
    path = os.path.join(out, "sweep.csv")
    write_sweep_csv(path, rows)
    write_manifest(out, "experiment prob-sweep", cfg.to_dict(), [a.checkpoint], [path])
    dices = [r.dice for r in rows]
    _note(f"mean Dice {sum(dices) / len(dices):.4f}, min {min(dices):.4f}")


def cmd_false_positive(a):
    from .experiments import experiment_false_positive

    model = _load_model(a.checkpoint)
    cfg = _infer_config(a, model)
    out = _outdir(a.out)
    hm = experiment_false_positive(model, a.seed, cfg, spans=a.spans, levels=a.levels, nerve_q=a.nerve_q,
                                   kind=a.kind)
    files = [os.path.join(out, n) for n in ("heatmap.csv", "heatmap_hd.dat", "heatmap_hd95.dat", "heatmap.txt")]
    hm.write_csv(files[0])
    hm.write_matrix(files[1], "hd")
    hm.write_matrix(files[2], "hd95")
    with open(files[3], "w") as fh:
        fh.write(hm.ascii())
    config = dict(cfg.to_dict(), nerve_q=a.nerve_q, kind=a.kind, spans=list(a.spans), levels=list(a.levels))
    write_manifest(out, "experiment false-positive", config, [a.checkpoint], files)
    _note(hm.ascii())


# parser ---------------------------------------------------------------------

def _infer_flags(p, theta):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--theta", type=float, default=theta)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)


def _int_list(text):
    return tuple(int(v) for v in text.split(","))


def _float_list(text):
    return tuple(float(v) for v in text.split(","))


def build_parser():
    ap = argparse.ArgumentParser(prog="pcrefine", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"pcrefine {__version__}")
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for reproducibility)")
    ap.add_argument("--config", help="key = value file of flag defaults; explicit flags win")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic nerve or a training corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("straight", "branching"), default="straight")
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--fp-span", type=int)
    p.add_argument("--fp-q", type=float, default=0.9)
    p.add_argument("--corpus", type=int, default=0, help="generate this many randomized cases instead")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the network on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--subcloud-size", type=int, help="defaults to the network input size (2048, or 512 reduced)")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--theta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotation", choices=("so3", "z", "none"), default="so3")
    p.add_argument("--jitter-sigma", type=float, default=0.01)
    p.add_argument("--jitter-clip", type=float, default=0.05)
    p.add_argument("--reduced-spec", action="store_true", help="desk-scale architecture")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="refine one probability volume")
    _infer_flags(p, 0.1)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a segmentation against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--volume", help="probability volume, to report the cloud class ratio")
    p.add_argument("--theta", type=float, default=0.1)
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="synthetic shape experiments")
    esub = p.add_subparsers(dest="experiment", required=True)
    e = esub.add_parser("prob-sweep", help="Dice/HD95/VS over nerve kinds and probability levels")
    _infer_flags(e, 0.05)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_prob_sweep)
    e = esub.add_parser("false-positive", help="HD heat map over false-positive span and probability")
    _infer_flags(e, 0.05)
    e.add_argument("--out", required=True)
    e.add_argument("--nerve-q", type=float, default=0.5)
    e.add_argument("--kind", choices=("straight", "branching"), default="branching")
    e.add_argument("--spans", type=_int_list, default=FP_SPANS, help="comma-separated slice counts")
    e.add_argument("--levels", type=_float_list, default=PROBABILITY_LEVELS, help="comma-separated q_fp values")
    e.set_defaults(func=cmd_false_positive)
    return ap


def _apply_config(ap, argv):
    """Parse once to find the command and ``--config``, then re-parse with file defaults."""
    args = ap.parse_args(argv)
    if not args.config:
        return args
    values = read_config(args.config)
    leaf = ap._subparsers._group_actions[0].choices[args.command]
    if args.command == "experiment":
        leaf = leaf._subparsers._group_actions[0].choices[args.experiment]
    known = {a.dest for a in leaf._actions} | {"threads"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"{args.config}: unknown keys for {args.command}: {', '.join(unknown)}")
    if "threads" in values:
        ap.set_defaults(threads=values.pop("threads"))
    leaf.set_defaults(**values)
    return ap.parse_args(argv)


def _set_threads(n):
    if n < 1:
        raise CliError("--threads must be >= 1")
    for var in THREAD_VARS:
        os.environ[var] = str(n)
    if "numpy" in sys.modules:
        _note("note: numpy was already loaded; --threads affects only new processes")


def main(argv=None):
    ap = build_parser()
    try:
        args = _apply_config(ap, argv)
        _set_threads(args.threads)
        t0 = time.perf_counter()
        args.func(args)
        _note(f"{args.command} finished in {time.perf_counter() - t0:.1f} s")
    except CliError as exc:
        _note(f"pcrefine: error: {exc}")
        return 2
    except Exception as exc:  # noqa: BLE001
        from .errors import PcrefineError

        if isinstance(exc, (PcrefineError, OSError)):
            _note(f"pcrefine: error: {exc}")
            return 1
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())

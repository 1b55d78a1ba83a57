"""Parameter checkpoint archive.

A zip archive holding ``header.txt`` (format version, parameter count,
tensor count) followed by one raw entry per array: ``<name>.f64`` whose
first line is the comma-separated shape and the rest little-endian
float64 values in row-major order.  Entries are written with a fixed
timestamp so identical parameters give byte-identical files.  An
optional ``spec.json`` entry records the network architecture.
"""
import io
import json
import zipfile

import numpy as np

from .errors import InputError

FORMAT_VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)


def _encode(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = ",".join(str(n) for n in arr.shape) + "\n"
    return head.encode("ascii") + arr.tobytes(order="C")


def _decode(raw):
    nl = raw.index(b"\n")
    head = raw[:nl].decode("ascii")
    shape = tuple(int(n) for n in head.split(",")) if head else ()
    arr = np.frombuffer(raw[nl + 1:], dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise InputError(f"checkpoint entry has {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float64)


def save_checkpoint(path, params, state=None, spec=None):
    """Write ``params`` (name -> array), optional non-learned ``state`` arrays and a spec dict."""
    state = state or {}
    count = int(sum(np.asarray(a).size for a in params.values()))
    header = (
        f"pcrefine-checkpoint\nversion={FORMAT_VERSION}\n"
        f"parameter_count={count}\ntensors={len(params)}\nstate_tensors={len(state)}\n"
    )
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_STAMP)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        put("header.txt", header)
        if spec is not None:
            put("spec.json", json.dumps(spec, sort_keys=True))
        for name in sorted(params):
            put(f"param/{name}.f64", _encode(params[name]))
        for name in sorted(state):
            put(f"state/{name}.f64", _encode(state[name]))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_header(path):
    with zipfile.ZipFile(path) as zf:
        text = zf.read("header.txt").decode("ascii")
    lines = text.strip().splitlines()
    if not lines or lines[0] != "pcrefine-checkpoint":
        raise InputError(f"{path}: not a pcrefine checkpoint")
    return dict(line.split("=", 1) for line in lines[1:])


def read_spec(path):
    """The stored architecture dict, or None for checkpoints saved without one."""
    try:
        with zipfile.ZipFile(path) as zf:
            if "spec.json" not in zf.namelist():
                return None
            return json.loads(zf.read("spec.json"))
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(params, state)`` dicts of float64 arrays."""
    try:
        header = read_header(path)
        params, state = {}, {}
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                if name.startswith("param/"):
                    params[name[6:-4]] = _decode(zf.read(name))
                elif name.startswith("state/"):
                    state[name[6:-4]] = _decode(zf.read(name))
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if int(header["version"]) != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {header['version']}")
    count = sum(a.size for a in params.values())
    if count != int(header["parameter_count"]):
        raise InputError(f"{path}: header says {header['parameter_count']} parameters, found {count}")
    return params, state

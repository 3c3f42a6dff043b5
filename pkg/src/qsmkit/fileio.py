"""File formats: QSMV volumes, binary containers, manifests, CSV, PGM.

Everything here is little-endian and written in deterministic order so
reruns produce byte-identical files.  See FORMATS.md for the layouts.
"""

import hashlib
import struct

import numpy as np

from .dipole import Volume
from .errors import ConfigError, ShapeError
from .ir2unet import NetworkConfig, build_network

QSMV_MAGIC = b"QSMV"
CONTAINER_MAGIC = b"QSMC"
_ARRAY_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_ARRAY_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# QSMV volumes


def write_qsmv(path, volume):
    """Write a Volume as float32, payload x-fastest then y then z."""
    vals = np.asarray(volume.values, dtype=np.float32)
    nx, ny, nz = vals.shape
    with open(path, "wb") as f:
        f.write(QSMV_MAGIC)
        f.write(struct.pack("<HBB", 1, 0, 0))
        f.write(struct.pack("<III", nx, ny, nz))
        f.write(struct.pack("<fff", *volume.voxel_size_mm))
        f.write(np.ascontiguousarray(vals, dtype="<f4").ravel(order="F").tobytes())


def read_qsmv(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != QSMV_MAGIC:
        raise ConfigError(f"{path}: not a QSMV file (bad magic)")
    version, dtype_code, _ = struct.unpack_from("<HBB", blob, 4)
    if version != 1 or dtype_code != 0:
        raise ConfigError(f"{path}: unsupported QSMV version/dtype {version}/{dtype_code}")
    nx, ny, nz = struct.unpack_from("<III", blob, 8)
    voxel = struct.unpack_from("<fff", blob, 20)
    payload = np.frombuffer(blob, dtype="<f4", count=nx * ny * nz, offset=32)
    if payload.size != nx * ny * nz:
        raise ShapeError(f"{path}: truncated payload")
    vals = np.ascontiguousarray(payload.reshape((nx, ny, nz), order="F"))
    return Volume(vals, voxel_size_mm=voxel)


# ---------------------------------------------------------------------------
# generic binary container (checkpoints, patch archives)


def write_container(path, arrays=None, texts=None):
    """Named float/int arrays plus named UTF-8 text blobs, sorted by name."""
    arrays = dict(arrays or {})
    texts = dict(texts or {})
    entries = sorted(
        [(name, "a", arr) for name, arr in arrays.items()]
        + [(name, "t", txt) for name, txt in texts.items()]
    )
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<HHI", 1, 0, len(entries)))
        for name, kind, payload in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            if kind == "t":
                tb = payload.encode("utf-8")
                f.write(struct.pack("<BI", 1, len(tb)))
                f.write(tb)
            else:
                arr = np.asarray(payload)
                if arr.dtype not in _ARRAY_CODES:
                    arr = arr.astype(np.float64)
                code = _ARRAY_CODES[arr.dtype]
                f.write(struct.pack("<BBB", 0, code, arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr).astype(_ARRAY_DTYPES[code]).tobytes())


def read_container(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CONTAINER_MAGIC:
        raise ConfigError(f"{path}: not a container file (bad magic)")
    version, _, count = struct.unpack_from("<HHI", blob, 4)
    if version != 1:
        raise ConfigError(f"{path}: unsupported container version {version}")
    arrays, texts = {}, {}
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        kind = blob[off]
        off += 1
        if kind == 1:
            (tlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            texts[name] = blob[off : off + tlen].decode("utf-8")
            off += tlen
        else:
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            dt = np.dtype(_ARRAY_DTYPES[code])
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape)
            off += n * dt.itemsize
    return arrays, texts


# ---------------------------------------------------------------------------
# key=value text blocks (configs, manifests)


def format_kv(data):
    lines = []
    for key in sorted(data):
        val = data[key]
        sval = repr(val) if isinstance(val, float) else str(val)
        if "\n" in sval:
            raise ConfigError(f"value for {key!r} may not contain newlines")
        lines.append(f"{key}={sval}")
    return "\n".join(lines) + "\n"


def parse_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def write_manifest(path, data):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_kv(data))


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_kv(f.read())


# ---------------------------------------------------------------------------
# network checkpoints


def _config_kv(cfg):
    return {
        "T": cfg.T,
        "levels": cfg.levels,
        "base_channels": cfg.base_channels,
        "dropout_rate": cfg.dropout_rate,
        "share_weights_across_iterations": cfg.share_weights_across_iterations,
        "dtype": cfg.dtype,
    }


def config_from_kv(kv):
    return NetworkConfig(
        T=int(kv["T"]),
        levels=int(kv["levels"]),
        base_channels=int(kv["base_channels"]),
        dropout_rate=float(kv["dropout_rate"]),
        share_weights_across_iterations=kv["share_weights_across_iterations"] == "True",
        dtype=kv.get("dtype", "float32"),
    )


def save_checkpoint(path, net, epoch=0, include_optimizer=True):
    """Config echo plus every named parameter/buffer (and Adam state)."""
    arrays = dict(net.named_arrays())
    if include_optimizer:
        for name, p in net.params.items():
            arrays[f"{name}.adam_m"] = p.adam_m
            arrays[f"{name}.adam_v"] = p.adam_v
            arrays[f"{name}.step_count"] = np.asarray(p.step_count, dtype=np.int64)
    texts = {
        "config": format_kv(_config_kv(net.cfg)),
        "meta": format_kv({"epoch": int(epoch), "format": "qsmkit-checkpoint-1"}),
    }
    write_container(path, arrays=arrays, texts=texts)


def load_checkpoint(path):
    """Rebuild the network a checkpoint describes; returns (net, epoch)."""
    arrays, texts = read_container(path)
    if "config" not in texts:
        raise ConfigError(f"{path}: checkpoint has no config echo")
    cfg = config_from_kv(parse_kv(texts["config"]))
    net = build_network(cfg, np.random.default_rng(0))
    net.load_arrays(arrays)
    for name, p in net.params.items():
        if f"{name}.adam_m" in arrays:
            p.adam_m = arrays[f"{name}.adam_m"].astype(p.data.dtype)
            p.adam_v = arrays[f"{name}.adam_v"].astype(p.data.dtype)
            p.step_count = int(arrays[f"{name}.step_count"])
    epoch = int(parse_kv(texts.get("meta", "epoch=0")).get("epoch", 0))
    return net, epoch


# ---------------------------------------------------------------------------
# patch archives


def save_patch_archive(path, pairs, voxel_size_mm=(1.0, 1.0, 1.0)):
    arrays = {}
    for i, (field_patch, chi_patch) in enumerate(pairs):
        arrays[f"field/{i:06d}"] = np.asarray(field_patch, dtype=np.float32)
        arrays[f"chi/{i:06d}"] = np.asarray(chi_patch, dtype=np.float32)
    meta = {
        "count": len(pairs),
        "voxel_size_mm": ",".join(repr(float(v)) for v in voxel_size_mm),
        "format": "qsmkit-patches-1",
    }
    write_container(path, arrays=arrays, texts={"meta": format_kv(meta)})


def load_patch_archive(path):
    arrays, texts = read_container(path)
    meta = parse_kv(texts["meta"])
    count = int(meta["count"])
    pairs = [(arrays[f"field/{i:06d}"], arrays[f"chi/{i:06d}"]) for i in range(count)]
    voxel = tuple(float(v) for v in meta["voxel_size_mm"].split(","))
    return pairs, voxel


# ---------------------------------------------------------------------------
# history CSV and PGM slices


def history_csv_text(history):
    lines = ["step,epoch,lr,loss"]
    for step, epoch, lr, loss in history.steps:
        lines.append(f"{step},{epoch},{lr!r},{loss!r}")
    return "\n".join(lines) + "\n"


def parse_history_csv(text):
    rows = []
    lines = text.strip().splitlines()
    if lines[0] != "step,epoch,lr,loss":
        raise ConfigError("history CSV has an unexpected header")
    for line in lines[1:]:
        step, epoch, lr, loss = line.split(",")
        rows.append((int(step), int(epoch), float(lr), float(loss)))
    return rows


def export_pgm_slice(volume, axis, index, window):
    """One slice as 16-bit grayscale rows; linear window [lo, hi] -> [0, 65535].

    Values are clamped to the window and rounded half-to-even.  Row axis
    is the first remaining volume axis, columns the second.
    """
    lo, hi = window
    if not hi > lo:
        raise ConfigError(f"window must satisfy lo < hi, got {window}")
    axes = {"x": 0, "y": 1, "z": 2}
    if axis not in axes:
        raise ConfigError(f"axis must be one of x, y, z, got {axis!r}")
    ax = axes[axis]
    if not 0 <= index < volume.dims[ax]:
        raise ConfigError(
            f"slice index {index} out of bounds for axis {axis} of extent {volume.dims[ax]}"
        )
    sl = np.take(volume.values, index, axis=ax).astype(np.float64)
    scaled = (np.clip(sl, lo, hi) - lo) / (hi - lo) * 65535.0
    pix = np.rint(scaled).astype(">u2")
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n65535\n".encode("ascii")
    return header + pix.tobytes()


def read_pgm(path_or_bytes):
    blob = path_or_bytes
    if not isinstance(blob, bytes):
        with open(blob, "rb") as f:
            blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ConfigError("expected a 16-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w)

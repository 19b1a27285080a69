"""Portable model serialization (JSON manifest + raw weight blob) and image I/O.

The manifest is human-readable JSON describing layer geometry and byte
ranges; the blob is the concatenation of all parameters as little-endian
binary32, promoted to binary64 at load. Images are binary PPM (P6) scaled
to [0, 1]; masks are binary PGM (P5) with selected pixels at 255.
"""

import json
from pathlib import Path

import numpy as np

from . import model_graph as mg
from .errors import (
    ImageFormatError,
    ManifestShapeError,
    ModelFormatError,
    NonFiniteWeightError,
    TruncatedBlobError,
    VersionMismatchError,
)

FORMAT_VERSION = 1


def _param_entry(prefix: str, shape, cursor: int) -> tuple[dict, int]:
    length = 4 * int(np.prod(shape))
    entry = {f"{prefix}_offset": cursor, f"{prefix}_length": length}
    return entry, cursor + length


def _layer_descriptor(layer, cursor: int) -> tuple[dict, list, int]:
    """Manifest descriptor, parameter arrays in blob order, next free offset."""
    if isinstance(layer, mg.Dense):
        desc = {"kind": "dense", "weights_shape": list(layer.weights.shape)}
        ent, cursor = _param_entry("weights", layer.weights.shape, cursor)
        desc.update(ent)
        ent, cursor = _param_entry("bias", layer.bias.shape, cursor)
        desc.update(ent)
        return desc, [layer.weights, layer.bias], cursor
    if isinstance(layer, mg.Conv2D):
        desc = {
            "kind": "conv2d",
            "kernel_shape": list(layer.kernel.shape),
            "strides": list(layer.strides),
            "padding": layer.padding,
        }
        ent, cursor = _param_entry("kernel", layer.kernel.shape, cursor)
        desc.update(ent)
        params = [layer.kernel]
        if layer.bias is not None:
            ent, cursor = _param_entry("bias", layer.bias.shape, cursor)
            desc.update(ent)
            params.append(layer.bias)
        return desc, params, cursor
    if isinstance(layer, mg.MaxPool2D):
        return {"kind": "maxpool2d", "pool": list(layer.pool), "strides": list(layer.strides)}, [], cursor
    if isinstance(layer, mg.AvgPool2D):
        return {"kind": "avgpool2d", "pool": list(layer.pool), "strides": list(layer.strides)}, [], cursor
    if isinstance(layer, mg.Flatten):
        return {"kind": "flatten"}, [], cursor
    if isinstance(layer, mg.ReLU):
        return {"kind": "relu"}, [], cursor
    if isinstance(layer, mg.ResidualBlock):
        branch = []
        params = []
        for sub in layer.branch:
            d, p, cursor = _layer_descriptor(sub, cursor)
            branch.append(d)
            params.extend(p)
        desc = {"kind": "residual", "branch": branch, "projection": None}
        if layer.projection is not None:
            d, p, cursor = _layer_descriptor(layer.projection, cursor)
            desc["projection"] = d
            params.extend(p)
        return desc, params, cursor
    raise ModelFormatError(f"cannot serialize layer kind {type(layer).__name__}")


def save_model(net: mg.Network) -> tuple[bytes, bytes]:
    """Serialize a network to (manifest bytes, blob bytes)."""
    descriptors = []
    params = []
    cursor = 0
    for layer in net.layers:
        desc, p, cursor = _layer_descriptor(layer, cursor)
        descriptors.append(desc)
        params.extend(p)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": net.name,
        "input_shape": list(net.input_shape),
        "num_outputs": net.num_outputs,
        "preprocessing": _preprocessing_dict(net.preprocessing),
        "layers": descriptors,
    }
    if net.labels is not None:
        manifest["labels"] = list(net.labels)
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    return (json.dumps(manifest, indent=2) + "\n").encode("utf-8"), blob


def _preprocessing_dict(prep: mg.Preprocessing) -> dict:
    if prep.mode == "centered":
        return {"mode": "centered", "means": [float(m) for m in prep.means]}
    return {"mode": prep.mode}


def _read_param(blob: bytes, desc: dict, prefix: str, shape, used: list) -> np.ndarray:
    try:
        offset = desc[f"{prefix}_offset"]
        length = desc[f"{prefix}_length"]
    except KeyError as exc:
        raise ManifestShapeError(f"layer descriptor missing {prefix} byte range") from exc
    count = int(np.prod(shape))
    if length != 4 * count:
        raise ManifestShapeError(
            f"{prefix} length {length} bytes does not match declared shape {tuple(shape)}"
        )
    if offset < 0 or offset + length > len(blob):
        raise TruncatedBlobError(
            f"{prefix} range [{offset}, {offset + length}) exceeds blob of {len(blob)} bytes"
        )
    used.append((offset, offset + length))
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    arr = values.astype(np.float64).reshape(shape)
    if not np.isfinite(arr).all():
        raise NonFiniteWeightError(f"{prefix} values contain NaN or infinity")
    return arr


def _layer_from_descriptor(desc: dict, blob: bytes, used: list) -> mg.LayerSpec:
    kind = desc.get("kind")
    if kind == "dense":
        shape = desc["weights_shape"]
        w = _read_param(blob, desc, "weights", shape, used)
        b = _read_param(blob, desc, "bias", (shape[0],), used)
        return mg.Dense(w, b)
    if kind == "conv2d":
        shape = desc["kernel_shape"]
        k = _read_param(blob, desc, "kernel", shape, used)
        bias = None
        if "bias_offset" in desc:
            bias = _read_param(blob, desc, "bias", (shape[0],), used)
        return mg.Conv2D(k, bias, tuple(desc.get("strides", (1, 1))), desc.get("padding", "valid"))
    if kind == "maxpool2d":
        return mg.MaxPool2D(tuple(desc["pool"]), tuple(desc["strides"]))
    if kind == "avgpool2d":
        return mg.AvgPool2D(tuple(desc["pool"]), tuple(desc["strides"]))
    if kind == "flatten":
        return mg.Flatten()
    if kind == "relu":
        return mg.ReLU()
    if kind == "residual":
        branch = tuple(_layer_from_descriptor(d, blob, used) for d in desc["branch"])
        proj = desc.get("projection")
        projection = _layer_from_descriptor(proj, blob, used) if proj else None
        return mg.ResidualBlock(branch, projection)
    raise ManifestShapeError(f"unknown layer kind {kind!r} in manifest")


def load_model_bytes(manifest_bytes: bytes, blob: bytes) -> mg.Network:
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"manifest format_version {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    used: list[tuple[int, int]] = []
    layers = tuple(
        _layer_from_descriptor(d, blob, used) for d in manifest.get("layers", [])
    )
    used.sort()
    for (a0, a1), (b0, _) in zip(used, used[1:]):
        if b0 < a1:
            raise ManifestShapeError("weight byte ranges overlap")
    total = sum(b - a for a, b in used)
    if total != len(blob):
        if total > len(blob):
            raise TruncatedBlobError(f"blob holds {len(blob)} bytes, manifest declares {total}")
        raise ManifestShapeError(f"blob holds {len(blob)} bytes beyond declared {total}")
    prep = manifest.get("preprocessing", {"mode": "unit"})
    means = prep.get("means")
    preprocessing = mg.Preprocessing(
        prep.get("mode", "unit"),
        np.asarray(means, dtype=np.float64) if means is not None else None,
    )
    labels = manifest.get("labels")
    try:
        return mg.Network(
            layers=layers,
            input_shape=tuple(manifest["input_shape"]),
            num_outputs=int(manifest["num_outputs"]),
            name=manifest.get("name", ""),
            labels=tuple(labels) if labels is not None else None,
            preprocessing=preprocessing,
        )
    except KeyError as exc:
        raise ManifestShapeError(f"manifest missing required field {exc}") from exc


def load_model(manifest_path, blob_path) -> mg.Network:
    return load_model_bytes(Path(manifest_path).read_bytes(), Path(blob_path).read_bytes())


def save_model_files(net: mg.Network, manifest_path, blob_path) -> None:
    manifest, blob = save_model(net)
    Path(manifest_path).write_bytes(manifest)
    Path(blob_path).write_bytes(blob)


# --- Netpbm image I/O ---------------------------------------------------


def _read_pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Parse 'P6'/'P5' headers; returns (width, height, maxval, data offset)."""
    if not data.startswith(magic):
        raise ImageFormatError(f"{path}: expected {magic.decode()} file")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise ImageFormatError(f"{path}: truncated header")
        c = data[pos : pos + 1]
        if c == b"#":  # comment runs to end of line
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise ImageFormatError(f"{path}: malformed header byte {c!r}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: header not terminated by whitespace")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    return width, height, maxval, pos


def load_image(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into a [H, W, 3] tensor scaled to [0, 1]."""
    data = Path(path).read_bytes()
    width, height, _, pos = _read_pnm_header(data, b"P6", path)
    need = width * height * 3
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def save_image(image: np.ndarray, path) -> None:
    """Write a [H, W, 3] tensor in [0, 1] as binary PPM (P6)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected [H, W, 3] image, got shape {image.shape}")
    raster = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster.tobytes())


def load_mask(path) -> np.ndarray:
    """Read a binary PGM (P5) object mask; values above 127 are object pixels."""
    data = Path(path).read_bytes()
    width, height, _, pos = _read_pnm_header(data, b"P5", path)
    need = width * height
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    values = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return values > 127


def save_mask(mask: np.ndarray, path) -> None:
    """Write a boolean [H, W] mask as binary PGM (P5): selected=255, else 0."""
    if mask.ndim != 2:
        raise ImageFormatError(f"expected [H, W] mask, got shape {mask.shape}")
    raster = np.where(mask, 255, 0).astype(np.uint8)
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster.tobytes())

"""On-disk formats: image files, network checkpoints, mixture files, CSV tables.

SFSD image file (little-endian)::

    b"SFSD" | version u32 | W u32 | H u32 | H*W float32 (row-major) | H*W uint8 labels

A checkpoint is a JSON manifest next to a raw blob of little-endian float32
parameters, concatenated in the layer order listed in the manifest.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from .datagen import LabeledImage
from .gmm import InternalDistribution
from .network import PARAM_ORDER, SegNetwork

MAGIC = b"SFSD"
SFSD_VERSION = 1
_HEADER = struct.Struct("<4sIII")
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def write_sfsd(path, image: LabeledImage):
    h, w = image.pixels.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, SFSD_VERSION, w, h))
        fh.write(image.pixels.astype("<f4").tobytes())
        fh.write(image.mask.astype(np.uint8).tobytes())


def read_sfsd(path) -> LabeledImage:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, w, h = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SFSD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = w * h
    if len(data) != _HEADER.size + 5 * n:
        raise FormatError(f"{path}: expected {_HEADER.size + 5 * n} bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype="<f4", count=n, offset=_HEADER.size).reshape(h, w)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size + 4 * n).reshape(h, w)
    return LabeledImage(pixels.astype(np.float64), mask.copy())


def write_csv_image(stem, image: LabeledImage):
    """Two grids: ``<stem>_image.csv`` (float32 precision) and ``<stem>_mask.csv``."""
    np.savetxt(f"{stem}_image.csv", image.pixels.astype(np.float32), delimiter=",", fmt="%.9g")
    np.savetxt(f"{stem}_mask.csv", image.mask, delimiter=",", fmt="%d")


def read_csv_image(stem) -> LabeledImage:
    pixels = np.loadtxt(f"{stem}_image.csv", delimiter=",", ndmin=2).astype(np.float32)
    mask = np.loadtxt(f"{stem}_mask.csv", delimiter=",", ndmin=2)
    if mask.shape != pixels.shape:
        raise FormatError(f"{stem}: image and mask grids differ in shape")
    return LabeledImage(pixels.astype(np.float64), mask.astype(np.uint8))


def save_split(directory, images, file_format="sfsd"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        if file_format == "sfsd":
            write_sfsd(d / f"{i:05d}.sfsd", img)
        elif file_format == "csv":
            write_csv_image(d / f"{i:05d}", img)
        else:
            raise ValueError(f"unknown file format {file_format!r}")


def load_split(directory) -> list[LabeledImage]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"split directory {d} does not exist")
    binary = sorted(d.glob("*.sfsd"))
    if binary:
        return [read_sfsd(p) for p in binary]
    stems = sorted(str(p)[: -len("_image.csv")] for p in d.glob("*_image.csv"))
    if not stems:
        raise FileNotFoundError(f"no images found in {d}")
    return [read_csv_image(s) for s in stems]


def save_checkpoint(path, net: SegNetwork, optimizer=None, step=0, extra=None):
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest dict."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    layers, offset = [], 0
    chunks = []
    for name in PARAM_ORDER:
        arr = net.params[name]
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
        chunks.append(arr.astype("<f4").ravel())
    blob_path.write_bytes(np.concatenate(chunks).tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "blob": blob_path.name,
        "height": net.height,
        "width": net.width,
        "latent_relu": net.latent_relu,
        "layers": layers,
        "optimizer": optimizer or {},
        "step": int(step),
    }
    manifest.update(extra or {})
    write_json(path.with_suffix(".json"), manifest)
    return manifest


def load_checkpoint(path):
    """Returns ``(net, manifest)``; parameters come back as float64."""
    path = Path(path).with_suffix(".json")
    manifest = _read_json(path)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    flat = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f4")
    total = sum(layer["count"] for layer in manifest["layers"])
    if flat.size != total:
        raise FormatError(f"{path}: blob holds {flat.size} values, manifest lists {total}")
    params = {}
    for layer in manifest["layers"]:
        chunk = flat[layer["offset"]:layer["offset"] + layer["count"]]
        params[layer["name"]] = chunk.astype(np.float64).reshape(layer["shape"])
    missing = set(PARAM_ORDER) - set(params)
    if missing:
        raise FormatError(f"{path}: missing layers {sorted(missing)}")
    net = SegNetwork(params, manifest["height"], manifest["width"], manifest.get("latent_relu", True))
    return net, manifest


def gmm_to_dict(dist: InternalDistribution):
    comps = []
    for c in range(dist.num_components):
        comps.append({
            "class": dist.component_class(c),
            "weight": float(dist.weights[c]),
            "mean": dist.means[c].tolist(),
            "covariance": dist.covariances[c].ravel().tolist(),
        })
    return {
        "K": dist.num_classes,
        "omega": dist.components_per_class,
        "F": dist.dim,
        "rho": dist.rho,
        "reg": dist.reg,
        "class_priors": None if dist.class_priors is None else list(map(float, dist.class_priors)),
        "components": comps,
    }


def gmm_from_dict(data) -> InternalDistribution:
    try:
        k, w, f = int(data["K"]), int(data["omega"]), int(data["F"])
        comps = data["components"]
        if len(comps) != k * w:
            raise FormatError(f"expected {k * w} components, found {len(comps)}")
        priors = data.get("class_priors")
        return InternalDistribution(
            num_classes=k,
            components_per_class=w,
            weights=np.array([c["weight"] for c in comps], dtype=np.float64),
            means=np.array([c["mean"] for c in comps], dtype=np.float64).reshape(k * w, f),
            covariances=np.array([c["covariance"] for c in comps], dtype=np.float64).reshape(k * w, f, f),
            rho=float(data["rho"]),
            reg=float(data.get("reg", 0.0)),
            class_priors=None if priors is None else np.array(priors, dtype=np.float64),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed mixture file: {exc}") from exc


def save_gmm(path, dist: InternalDistribution, extra=None):
    data = gmm_to_dict(dist)
    data.update(extra or {})
    write_json(path, data)


def load_gmm(path) -> InternalDistribution:
    return gmm_from_dict(_read_json(path))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else _fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_json(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc

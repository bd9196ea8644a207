"""File formats shared by the command-line stages.

Volumes
    One JSON header line (``resolution``, ``bbox_min``, ``bbox_max``,
    ``dtype": "f32le"`` and an optional ``meta`` object) followed by raw
    little-endian float32 values with x varying fastest.
Skeleton streams
    Line-delimited JSON: a header record, then one record per frame with
    ``frame``, ``timestamp`` and ``joints`` (J lists of three millimetre values).
Checkpoints
    A magic line, one JSON header line (kind, config, seed, tensor table) and
    the concatenated little-endian float32 tensor payloads.
Calibration
    JSON array of cameras, each with intrinsics, a row-major camera-to-world
    rotation and the camera centre.
Mattes
    8- or 16-bit grayscale PNG.

Readers reject malformed input rather than repairing it.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np
from PIL import Image

from pvhnet.errors import CorruptHeader, MissingFile, SchemaViolation, TruncatedData
from pvhnet.geometry import CameraIntrinsics, CameraPose, SoftMatte, VoxelGrid
from pvhnet.skeleton import SkeletonFrame, SkeletonStream, joint_map_name, joint_names

VOLUME_DTYPE = "f32le"
SKELETON_FORMAT = "pvhnet-skeletons"
CHECKPOINT_MAGIC = b"PVHNET-CHECKPOINT\n"
CHECKPOINT_VERSION = 1
_TENSOR_DTYPES = {"f32le": "<f4", "f64le": "<f8"}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} does not exist", field="path", source=str(path))
    return path


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- volumes -------------------------------------------------------------

def encode_volume(grid: VoxelGrid, meta: dict | None = None) -> bytes:
    header = {"resolution": list(grid.resolution), "bbox_min": grid.bbox_min.tolist(),
              "bbox_max": grid.bbox_max.tolist(), "dtype": VOLUME_DTYPE}
    if meta:
        header["meta"] = meta
    payload = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    return _dump(header).encode() + b"\n" + payload


def _vector3(header, key, source):
    v = header.get(key)
    if not (isinstance(v, list) and len(v) == 3 and all(isinstance(x, (int, float)) for x in v)
            and all(math.isfinite(x) for x in v)):
        raise CorruptHeader(f"{key} must be three finite numbers, got {v!r}", field=key, source=source, line=1)
    return np.array(v, dtype=np.float64)


def decode_volume(data: bytes, source: str = "<bytes>") -> tuple[VoxelGrid, dict]:
    """Parse volume bytes into ``(grid, meta)``."""
    nl = data.find(b"\n")
    if nl < 0:
        raise CorruptHeader("missing header line", field="header", source=source, line=1)
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"header is not JSON: {exc}", field="header", source=source, line=1) from None
    if not isinstance(header, dict):
        raise CorruptHeader("header must be a JSON object", field="header", source=source, line=1)
    unknown = set(header) - {"resolution", "bbox_min", "bbox_max", "dtype", "meta"}
    if unknown:
        raise CorruptHeader(f"unknown header fields {sorted(unknown)}", field=sorted(unknown)[0],
                            source=source, line=1)
    res = header.get("resolution")
    if not (isinstance(res, list) and len(res) == 3 and all(isinstance(r, int) and r > 0 for r in res)):
        raise CorruptHeader(f"resolution must be three positive integers, got {res!r}",
                            field="resolution", source=source, line=1)
    if header.get("dtype") != VOLUME_DTYPE:
        raise CorruptHeader(f"dtype must be {VOLUME_DTYPE!r}, got {header.get('dtype')!r}",
                            field="dtype", source=source, line=1)
    lo, hi = _vector3(header, "bbox_min", source), _vector3(header, "bbox_max", source)
    if not np.all(hi > lo):
        raise CorruptHeader("bbox_max must exceed bbox_min on every axis", field="bbox_max", source=source, line=1)
    payload = data[nl + 1:]
    expected = int(np.prod(res)) * 4
    if len(payload) < expected:
        raise TruncatedData(f"payload has {len(payload) // 4} of {expected // 4} values",
                            field="payload", source=source)
    if len(payload) > expected:
        raise CorruptHeader(f"payload has {len(payload) - expected} bytes beyond the declared resolution",
                            field="resolution", source=source, line=1)
    values = np.frombuffer(payload, dtype="<f4").reshape(res, order="F").astype(np.float32)
    try:
        grid = VoxelGrid(values, lo, hi)
    except ValueError as exc:
        raise CorruptHeader(str(exc), field="payload", source=source) from None
    return grid, header.get("meta", {})


def write_volume(path, grid: VoxelGrid, meta: dict | None = None) -> None:
    _write_atomic(path, encode_volume(grid, meta))


def read_volume(path, with_meta: bool = False):
    path = _require(path)
    grid, meta = decode_volume(path.read_bytes(), str(path))
    return (grid, meta) if with_meta else grid


# -- skeleton streams ----------------------------------------------------

def encode_skeletons(stream: SkeletonStream) -> str:
    j = stream.joint_count or 0
    names = list(stream.frames[0].names) if stream.frames else list(joint_names(j))
    header = {"type": "header", "format": SKELETON_FORMAT, "version": 1, "joint_count": j,
              "joint_map": joint_map_name(j), "names": names, "meta": stream.meta}
    lines = [_dump(header)]
    for frame, idx, stamp in zip(stream.frames, stream.indices, stream.timestamps):
        lines.append(_dump({"frame": idx, "timestamp": stamp, "joints": frame.joints.tolist()}))
    return "\n".join(lines) + "\n"


def write_skeletons(path, stream: SkeletonStream) -> None:
    _write_atomic(path, encode_skeletons(stream).encode())


def decode_skeletons(text: str, source: str = "<text>") -> SkeletonStream:
    lines = text.splitlines()
    if not lines:
        raise SchemaViolation("missing header record", field="header", source=source, line=1)

    def parse(n, raw):
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"invalid JSON: {exc.msg}", field="record", source=source, line=n) from None
        if not isinstance(rec, dict):
            raise SchemaViolation("record must be a JSON object", field="record", source=source, line=n)
        return rec

    header = parse(1, lines[0])
    if header.get("type") != "header" or header.get("format") != SKELETON_FORMAT:
        raise SchemaViolation("first record must be a pvhnet skeleton header", field="format", source=source, line=1)
    j = header.get("joint_count")
    if not (isinstance(j, int) and j >= 0):
        raise SchemaViolation(f"joint_count must be a non-negative integer, got {j!r}",
                              field="joint_count", source=source, line=1)
    names = tuple(header.get("names") or joint_names(j))
    if len(names) != j:
        raise SchemaViolation(f"{len(names)} names for {j} joints", field="names", source=source, line=1)
    frames, indices, stamps = [], [], []
    for n, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            raise SchemaViolation("blank line inside stream", field="record", source=source, line=n)
        rec = parse(n, raw)
        missing = {"frame", "timestamp", "joints"} - set(rec)
        if missing:
            raise SchemaViolation(f"record lacks {sorted(missing)}", field=sorted(missing)[0], source=source, line=n)
        idx = rec["frame"]
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise SchemaViolation(f"frame must be an integer, got {idx!r}", field="frame", source=source, line=n)
        if indices and idx <= indices[-1]:
            raise SchemaViolation(f"frame index {idx} does not increase past {indices[-1]}",
                                  field="frame", source=source, line=n)
        if not isinstance(rec["timestamp"], (int, float)) or not math.isfinite(rec["timestamp"]):
            raise SchemaViolation("timestamp must be a finite number", field="timestamp", source=source, line=n)
        try:
            joints = np.array(rec["joints"], dtype=np.float64)
        except (TypeError, ValueError):
            raise SchemaViolation("joints must be numeric triples", field="joints", source=source, line=n) from None
        if joints.shape != (j, 3) or not np.all(np.isfinite(joints)):
            raise SchemaViolation(f"joints must be {j} finite [x, y, z] triples, got shape {joints.shape}",
                                  field="joints", source=source, line=n)
        frames.append(SkeletonFrame(joints, names))
        indices.append(idx)
        stamps.append(float(rec["timestamp"]))
    meta = header.get("meta") or {}
    meta.setdefault("joint_count", j)
    return SkeletonStream(frames, indices, stamps, meta)


def read_skeletons(path) -> SkeletonStream:
    path = _require(path)
    return decode_skeletons(path.read_text(), str(path))


# -- calibration and mattes ---------------------------------------------

def write_calibration(path, cameras) -> None:
    recs = []
    for k, pose in cameras:
        recs.append({"focal_length": k.focal_length, "principal_point": list(k.principal_point),
                     "image_size": list(k.image_size), "rotation": pose.rotation.reshape(-1).tolist(),
                     "translation": pose.translation.tolist()})
    _write_atomic(path, (json.dumps(recs, indent=1, sort_keys=True) + "\n").encode())


def read_calibration(path) -> list[tuple[CameraIntrinsics, CameraPose]]:
    path = _require(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc.msg}", field="cameras", source=str(path), line=exc.lineno) from None
    if not isinstance(doc, list) or not doc:
        raise SchemaViolation("expected a non-empty JSON array of cameras", field="cameras", source=str(path))
    cams = doc
    out = []
    for c, rec in enumerate(cams):
        try:
            k = CameraIntrinsics(float(rec["focal_length"]), tuple(rec["principal_point"]), tuple(rec["image_size"]))
            pose = CameraPose(np.array(rec["rotation"], dtype=np.float64).reshape(3, 3),
                              np.array(rec["translation"], dtype=np.float64))
        except (KeyError, IndexError) as exc:
            raise SchemaViolation(f"camera {c} lacks {exc.args[0]}", field=f"cameras[{c}].{exc.args[0]}",
                                  source=str(path)) from None
        except (TypeError, ValueError) as exc:
            raise SchemaViolation(f"camera {c}: {exc}", field=f"cameras[{c}]", source=str(path)) from None
        out.append((k, pose))
    return out


def write_matte(path, matte: SoftMatte, bits: int = 16) -> None:
    if bits == 8:
        img = Image.fromarray(np.round(matte.values * 255).astype(np.uint8), mode="L")
    elif bits == 16:
        img = Image.fromarray(np.round(matte.values * 65535).astype(np.uint16))
    else:
        raise ValueError(f"matte bit depth must be 8 or 16, got {bits}")
    img.save(path, format="PNG")


def read_matte(path) -> SoftMatte:
    path = _require(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.asarray(img)
    except OSError as exc:
        raise SchemaViolation(f"not a readable image: {exc}", field="matte", source=str(path)) from None
    if mode == "L":
        return SoftMatte(arr.astype(np.float64) / 255.0)
    if mode in ("I;16", "I;16B", "I;16L", "I") and arr.ndim == 2 and arr.max(initial=0) <= 65535:
        return SoftMatte(arr.astype(np.float64) / 65535.0)
    raise SchemaViolation(f"matte must be 8- or 16-bit grayscale, got mode {mode}", field="matte", source=str(path))


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path, kind: str, config: dict, tensors: dict[str, np.ndarray],
                    seed: int | None = None, extra: dict | None = None) -> None:
    """Write named tensors (as float32) plus a JSON description of how they were produced."""
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = "f32le"
        blob = np.ascontiguousarray(arr, dtype=_TENSOR_DTYPES[code]).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset,
                      "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": CHECKPOINT_VERSION, "kind": kind, "config": config, "seed": seed,
              "extra": extra or {}, "tensors": table}
    _write_atomic(path, CHECKPOINT_MAGIC + _dump(header).encode() + b"\n" + b"".join(blobs))


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)``; ``kind`` guards against loading the wrong model."""
    path = _require(path)
    data = path.read_bytes()
    src = str(path)
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptHeader("not a pvhnet checkpoint (bad magic line)", field="magic", source=src, line=1)
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    try:
        header = json.loads(rest[:nl].decode("utf-8")) if nl >= 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise CorruptHeader("checkpoint header is not a JSON object with a tensor table",
                            field="header", source=src, line=2)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CorruptHeader(f"unsupported checkpoint version {header.get('version')!r}",
                            field="version", source=src, line=2)
    if kind is not None and header.get("kind") != kind:
        raise SchemaViolation(f"expected a {kind} checkpoint, found {header.get('kind')!r}",
                              field="kind", source=src, line=2)
    payload = rest[nl + 1:]
    tensors = {}
    for entry in header["tensors"]:
        try:
            name, shape, code, off, nbytes = (entry["name"], tuple(entry["shape"]), entry["dtype"],
                                              entry["offset"], entry["nbytes"])
            dtype = np.dtype(_TENSOR_DTYPES[code])
        except (KeyError, TypeError):
            raise CorruptHeader(f"malformed tensor entry {entry!r}", field="tensors", source=src, line=2) from None
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise CorruptHeader(f"tensor {name}: {nbytes} bytes do not match shape {shape}",
                                field="tensors", source=src, line=2)
        if off + nbytes > len(payload):
            raise TruncatedData(f"tensor {name} extends past the end of the file", field=name, source=src)
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return header, tensors


def _optimizer_tensors(state) -> dict[str, np.ndarray]:
    out = {}
    if state is not None:
        for name, (eg2, edx2) in state.accumulators.items():
            out[f"adadelta/{name}/sq_grad"] = eg2
            out[f"adadelta/{name}/sq_delta"] = edx2
    return out


def _optimizer_state(header, tensors, dtype):
    from pvhnet.optim import AdadeltaState

    opt = header["extra"].get("optimizer", {})
    state = AdadeltaState(rho=opt.get("rho", 0.95), epsilon=opt.get("epsilon", 1e-6))
    for key in tensors:
        if key.startswith("adadelta/") and key.endswith("/sq_grad"):
            name = key[len("adadelta/"):-len("/sq_grad")]
            state.accumulators[name] = (tensors[key].astype(dtype),
                                        tensors[f"adadelta/{name}/sq_delta"].astype(dtype))
    return state


def save_autoencoder(path, model, state=None, seed: int | None = None, extra: dict | None = None) -> None:
    """Parameters, Adadelta accumulators and the config that built the graph."""
    tensors = dict(model.state_dict())
    tensors.update(_optimizer_tensors(state))
    extra = dict(extra or {})
    if state is not None:
        extra["optimizer"] = {"name": "adadelta", "rho": state.rho, "epsilon": state.epsilon}
    save_checkpoint(path, "autoencoder", model.config.to_dict(), tensors, seed, extra)


def load_autoencoder(path):
    """``(model, optimizer_state, header)`` from an autoencoder checkpoint."""
    from pvhnet.network import NetworkConfig, build_network

    header, tensors = load_checkpoint(path, "autoencoder")
    config = NetworkConfig.from_dict(header["config"])
    model = build_network(config)
    try:
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adadelta/")})
    except (KeyError, ValueError) as exc:
        raise CorruptHeader(f"checkpoint tensors do not fit the stored config: {exc}",
                            field="tensors", source=str(path)) from None
    return model, _optimizer_state(header, tensors, config.np_dtype), header


def save_smoother(path, model, state=None, seed: int | None = None, extra: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update(_optimizer_tensors(state))
    extra = dict(extra or {})
    if state is not None:
        extra["optimizer"] = {"name": "adadelta", "rho": state.rho, "epsilon": state.epsilon}
    save_checkpoint(path, "smoother", model.config.to_dict(), tensors, seed, extra)


def load_smoother(path):
    from pvhnet.lstm import SmootherConfig, build_smoother

    header, tensors = load_checkpoint(path, "smoother")
    try:
        config = SmootherConfig.from_dict(header["config"])
    except TypeError as exc:
        raise SchemaViolation(f"bad smoother config: {exc}", field="config", source=str(path)) from None
    model = build_smoother(config)
    try:
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adadelta/")})
    except (KeyError, ValueError) as exc:
        raise CorruptHeader(f"checkpoint tensors do not fit the stored config: {exc}",
                            field="tensors", source=str(path)) from None
    return model, _optimizer_state(header, tensors, np.dtype(config.dtype)), header


# -- dataset directories -------------------------------------------------

MANIFEST = "manifest.json"


def frame_name(index: int, ext: str = ".pvh") -> str:
    return f"{index:06d}{ext}"


def write_dataset(out_dir, dataset, specs: dict | None = None, write_mattes: bool = True) -> None:
    """Lay out a synthetic dataset as volume, matte, calibration and skeleton files.

    ``coarse/`` holds the coarse grids, ``input/`` their tricubic upsampling,
    ``target/`` the native volumes and ``mattes/camK/`` one PNG per frame.
    """
    out = Path(out_dir)
    for sub in ("coarse", "input", "target"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    meta = {"seed": dataset.seed, **dataset.meta}
    for frame in dataset.frames:
        name = frame_name(frame.index)
        write_volume(out / "coarse" / name, frame.coarse, meta)
        write_volume(out / "input" / name, frame.triplet.input_volume, meta)
        write_volume(out / "target" / name, frame.triplet.target_volume, meta)
        if write_mattes and frame.mattes is not None:
            for c, matte in enumerate(frame.mattes):
                cam_dir = out / "mattes" / f"cam{c}"
                cam_dir.mkdir(parents=True, exist_ok=True)
                write_matte(cam_dir / frame_name(frame.index, ".png"), matte)
    write_calibration(out / "calibration.json", dataset.cameras)
    stream = SkeletonStream([f.skeleton for f in dataset.frames], [f.index for f in dataset.frames],
                            [f.timestamp for f in dataset.frames], dict(meta))
    write_skeletons(out / "skeletons.jsonl", stream)
    manifest = {"format": "pvhnet-dataset", "version": 1, **meta,
                "frames": [f.index for f in dataset.frames],
                "bbox_min": np.asarray(dataset.bbox[0]).tolist(),
                "bbox_max": np.asarray(dataset.bbox[1]).tolist(),
                "body_height": dataset.body_height, "specs": specs or {}}
    _write_atomic(out / MANIFEST, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())


def read_manifest(data_dir) -> dict:
    path = _require(Path(data_dir) / MANIFEST)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc.msg}", field="manifest", source=str(path), line=exc.lineno) from None
    for key in ("frames", "coarse_resolution", "scale", "seed"):
        if key not in manifest:
            raise SchemaViolation(f"manifest lacks {key!r}", field=key, source=str(path))
    return manifest


def read_dataset(data_dir):
    """``(triplets, skeleton stream, manifest)`` from a directory written by :func:`write_dataset`."""
    from pvhnet.training import TrainingTriplet

    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    stream = read_skeletons(data_dir / "skeletons.jsonl")
    if stream.indices != list(manifest["frames"]):
        raise SchemaViolation("skeleton frames do not match the manifest", field="frames",
                              source=str(data_dir / "skeletons.jsonl"))
    triplets = []
    for idx, skel in zip(stream.indices, stream.frames):
        name = frame_name(idx)
        triplets.append(TrainingTriplet(read_volume(data_dir / "input" / name),
                                        read_volume(data_dir / "target" / name), skel))
    return triplets, stream, manifest

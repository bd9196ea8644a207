"""``pvhnet`` command-line entry point.

Exit status is 0 on success, 1 when arguments or input files fail validation
and 2 when a stage fails at run time.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pvhnet import kernels
from pvhnet.errors import ConfigError, MissingFile, PVHError, SchemaViolation, ShapeMismatch, UnknownFlag, UnsupportedFactor
from pvhnet.geometry import SUPPORTED_FACTORS, FusionMode
from pvhnet.optim import AdadeltaState

log = logging.getLogger("pvhnet")


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so diagnostics can name the offending field."""

    def error(self, message):
        field = None
        for token in message.replace(",", " ").split():
            if token.startswith("--"):
                field = token.strip("'\":")
                break
        raise ConfigError(message, field=field or self.prog)


def _build_parser() -> _Parser:
    p = _Parser(prog="pvhnet", description="Visual hull reconstruction, volumetric upscaling and pose regression.")
    p.add_argument("--threads", type=int, default=None, help="cap on internal parallelism")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, order-fixed reductions")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic capture dataset")
    s.add_argument("--body", help="BodyModel JSON (default: built-in humanoid)")
    s.add_argument("--motion", help="MotionSpec JSON (default: built-in gait)")
    s.add_argument("--rig", help="RigSpec JSON (default: 4-camera ring)")
    s.add_argument("--joints", type=int, choices=(17, 26), default=17)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--scale", type=int, default=1)
    s.add_argument("--coarse-res", type=int, default=32)
    s.add_argument("--fusion", choices=[m.value for m in FusionMode], default=FusionMode.PRODUCT.value)
    s.add_argument("--no-mattes", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("pvh", help="fuse calibrated mattes into a volume")
    s.add_argument("--calib", required=True)
    s.add_argument("--mattes", nargs="+", required=True, help="one image per camera, in calibration order")
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--bbox-min", type=float, nargs=3, required=True)
    s.add_argument("--bbox-max", type=float, nargs=3, required=True)
    s.add_argument("--fusion", choices=[m.value for m in FusionMode], default=FusionMode.PRODUCT.value)
    s.add_argument("--out", required=True)

    s = sub.add_parser("upscale", help="tricubic upsampling of a volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--scale", type=int, required=True)
    s.add_argument("--out", required=True)

    for name, text in (("pretrain", "fit the encoder to joint targets"), ("train", "dual-loss training")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="NetworkConfig JSON (default: reduced schedule matched to the data)")
        s.add_argument("--data", required=True)
        s.add_argument("--epochs", type=int, default=10)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--init", help="checkpoint to continue from")
        s.add_argument("--holdout-every", type=int, default=0, help="skip every k-th frame (0 keeps all)")
        s.add_argument("--augment", action=argparse.BooleanOptionalAction, default=(name == "train"))
        s.add_argument("--out", required=True)

    s = sub.add_parser("infer", help="skeleton and upscaled volume from coarse volumes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--volume", required=True, help="coarse volume file or a directory of them")
    s.add_argument("--scale", type=int, default=None)
    s.add_argument("--out-skeleton", required=True)
    s.add_argument("--out-volume", default=None)

    s = sub.add_parser("train-smoother", help="fit the temporal smoother")
    s.add_argument("--gt", required=True, help="ground-truth skeleton stream")
    s.add_argument("--est", default=None, help="noisy estimates; default corrupts --gt with --noise")
    s.add_argument("--noise", type=float, default=20.0, help="noise sigma in mm when --est is absent")
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--cells", type=int, default=64)
    s.add_argument("--lookback", type=int, default=5)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("smooth", help="temporally smooth a skeleton stream")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="pose or volume error reports")
    ev = s.add_subparsers(dest="target", required=True, parser_class=_Parser)
    e = ev.add_parser("pose")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--subset", default=None, help="JSON joint map: indices, [est, gt] pairs or {est: gt}")
    e.add_argument("--out", required=True)
    e = ev.add_parser("volume")
    e.add_argument("--out-volumes", required=True)
    e.add_argument("--inputs", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    return p


# options whose values must name existing files or directories
_INPUT_PATHS = {"body", "motion", "rig", "calib", "mattes", "volume", "config", "data", "init", "ckpt",
                "gt", "est", "input", "subset", "out_volumes", "inputs"}


@dataclass
class RunConfig:
    """A validated invocation: command, its options, and process-wide settings."""

    command: str
    options: dict = field(default_factory=dict)
    threads: int | None = None
    deterministic: bool = False
    verbosity: int = 0

    @property
    def seed(self) -> int | None:
        return self.options.get("seed")

    def to_argv(self) -> list[str]:
        argv: list[str] = []
        if self.threads is not None:
            argv += ["--threads", str(self.threads)]
        if self.deterministic:
            argv.append("--deterministic")
        argv += ["-v"] * self.verbosity
        argv += self.command.split()
        for key, value in sorted(self.options.items()):
            flag = "--" + ("in" if key == "input" else key.replace("_", "-"))
            if value is None or value is False:
                if key == "augment" and value is False:
                    argv.append("--no-augment")
                continue
            if value is True:
                argv.append(flag)
            elif isinstance(value, (list, tuple)):
                argv += [flag, *map(str, value)]
            else:
                argv += [flag, str(value)]
        return argv


def _check_json(path: str, field_name: str, loader):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc.msg}", field=field_name, source=path, line=exc.lineno) from None
    try:
        return loader(doc)
    except SchemaViolation:
        raise
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise SchemaViolation(f"invalid {field_name}: {exc}", field=field_name, source=path) from None


def _validate(cfg: RunConfig) -> None:
    opts = cfg.options
    for key in sorted(_INPUT_PATHS & set(opts)):
        value = opts[key]
        for path in value if isinstance(value, list) else [value]:
            if path is not None and not Path(path).exists():
                raise MissingFile(f"{path} does not exist", field="--" + key.replace("_", "-"), source=path)
    if "scale" in opts and opts["scale"] is not None and opts["scale"] not in SUPPORTED_FACTORS:
        raise UnsupportedFactor(f"--scale must be one of {{1, 2, 4}}, got {opts['scale']}")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("--threads must be at least 1", field="--threads")
    for key in ("epochs", "frames", "holdout_every", "cells", "layers", "lookback", "coarse_res", "resolution"):
        if opts.get(key) is not None and opts[key] < (0 if key in ("epochs", "holdout_every") else 1):
            raise ConfigError(f"--{key.replace('_', '-')} is out of range: {opts[key]}",
                              field="--" + key.replace("_", "-"))
    from pvhnet.network import NetworkConfig
    from pvhnet.synthetic import BodyModel, MotionSpec, RigSpec

    loaders = {"config": NetworkConfig.from_dict, "body": BodyModel.from_dict,
               "motion": MotionSpec.from_dict, "rig": RigSpec.from_dict}
    for key, loader in loaders.items():
        if opts.get(key):
            _check_json(opts[key], key, loader)
    if opts.get("subset"):
        _check_json(opts["subset"], "subset", lambda d: d)


def parse_config(argv: Sequence[str]) -> RunConfig:
    """Parse and validate a command line into a :class:`RunConfig`."""
    parser = _build_parser()
    ns, extra = parser.parse_known_args(list(argv))
    if extra:
        raise UnknownFlag(f"unrecognised argument {extra[0]!r}", field=extra[0])
    args = vars(ns)
    command = args.pop("command")
    if command == "eval":
        command = f"eval {args.pop('target')}"
    cfg = RunConfig(command, threads=args.pop("threads"), deterministic=args.pop("deterministic"),
                    verbosity=args.pop("verbose"))
    cfg.options = dict(sorted(args.items()))
    _validate(cfg)
    return cfg


# -- command implementations ---------------------------------------------

def _json_out(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _cmd_synth(o) -> None:
    from pvhnet import io
    from pvhnet.synthetic import BodyModel, MotionSpec, RigSpec, generate_dataset

    body = BodyModel.from_dict(json.loads(Path(o["body"]).read_text())) if o["body"] else BodyModel.humanoid(o["joints"])
    if o["motion"]:
        motion = MotionSpec.from_dict(json.loads(Path(o["motion"]).read_text()))
        if o["frames"]:
            motion.frame_count = o["frames"]
    else:
        motion = MotionSpec.default(body, o["frames"] or 200)
    rig = RigSpec.from_dict(json.loads(Path(o["rig"]).read_text())) if o["rig"] else RigSpec()
    ds = generate_dataset(body, motion, rig, o["coarse_res"], o["scale"], o["seed"],
                          mode=FusionMode(o["fusion"]), keep_mattes=not o["no_mattes"])
    specs = {"body": body.to_dict(), "motion": motion.to_dict(), "rig": rig.to_dict()}
    io.write_dataset(o["out"], ds, specs, write_mattes=not o["no_mattes"])
    log.info("wrote %d frames to %s", len(ds), o["out"])


def _cmd_pvh(o) -> None:
    from pvhnet import io
    from pvhnet.geometry import CameraView, build_pvh

    cams = io.read_calibration(o["calib"])
    if len(cams) != len(o["mattes"]):
        raise ShapeMismatch(f"{len(cams)} calibrated cameras but {len(o['mattes'])} mattes")
    views = [CameraView(k, p, io.read_matte(m)) for (k, p), m in zip(cams, o["mattes"])]
    grid = build_pvh(views, (np.array(o["bbox_min"]), np.array(o["bbox_max"])), o["resolution"],
                     FusionMode(o["fusion"]))
    io.write_volume(o["out"], grid, {"fusion": o["fusion"]})


def _cmd_upscale(o) -> None:
    from pvhnet import io
    from pvhnet.geometry import tricubic_upsample

    grid, meta = io.read_volume(o["volume"], with_meta=True)
    io.write_volume(o["out"], tricubic_upsample(grid, o["scale"]), meta)


def _load_training_data(o):
    from pvhnet import io

    triplets, stream, manifest = io.read_dataset(o["data"])
    k = o["holdout_every"]
    if k:
        triplets = [t for i, t in zip(stream.indices, triplets) if i % k != k - 1]
    return triplets, manifest


def _model_for(o, manifest, joint_count):
    from pvhnet import io
    from pvhnet.network import NetworkConfig, build_network

    if o["init"]:
        model, state, _ = io.load_autoencoder(o["init"])
        return model, state
    if o["config"]:
        config = NetworkConfig.from_dict(json.loads(Path(o["config"]).read_text()))
    else:
        c, n = manifest["coarse_resolution"], manifest["scale"]
        config = NetworkConfig.reduced(scale=n, base_resolution=c, coarse_resolution=c, joint_count=joint_count)
    return build_network(config), None


def _cmd_fit(o, stage: str) -> None:
    from pvhnet import io
    from pvhnet.training import pretrain_encoder, train

    triplets, manifest = _load_training_data(o)
    if not triplets:
        raise ShapeMismatch("no training frames left after the hold-out split")
    model, state = _model_for(o, manifest, triplets[0].target_joints.joint_count)
    if state is None:
        state = AdadeltaState(rho=model.config.rho, epsilon=model.config.epsilon)
    fit = pretrain_encoder if stage == "pretrain" else train
    model, history = fit(model, triplets, o["epochs"], seed=o["seed"], state=state, augmentation=o["augment"])
    extra = {"stage": stage, "epochs": o["epochs"], "history": history, "data_seed": manifest["seed"],
             "holdout_every": o["holdout_every"], "augment": o["augment"]}
    io.save_autoencoder(o["out"], model, state, seed=o["seed"], extra=extra)
    if history:
        log.info("%s: loss %.6g -> %.6g", stage, history[0], history[-1])


def _cmd_infer(o) -> None:
    from pvhnet import io
    from pvhnet.skeleton import SkeletonStream
    from pvhnet.training import infer

    model, _, header = io.load_autoencoder(o["ckpt"])
    src = Path(o["volume"])
    files = sorted(src.glob("*.pvh")) if src.is_dir() else [src]
    if not files:
        raise MissingFile(f"no .pvh volumes in {src}", field="--volume", source=str(src))
    out_dir = None
    if o["out_volume"] and src.is_dir():
        out_dir = Path(o["out_volume"])
        out_dir.mkdir(parents=True, exist_ok=True)
    frames, indices = [], []
    meta = {"seed": header.get("seed"), "model": "autoencoder"}
    for k, path in enumerate(files):
        skel, volume = infer(model, io.read_volume(path), o["scale"])
        frames.append(skel)
        try:
            indices.append(int(path.stem))
        except ValueError:
            indices.append(k)
        if o["out_volume"]:
            io.write_volume(out_dir / path.name if out_dir else o["out_volume"], volume, meta)
    if sorted(indices) != indices or len(set(indices)) != len(indices):
        indices = list(range(len(files)))
    io.write_skeletons(o["out_skeleton"], SkeletonStream(frames, indices, [float(i) for i in indices], meta))


def _cmd_train_smoother(o) -> None:
    from pvhnet import io
    from pvhnet.lstm import SmootherConfig, train_smoother

    truth = io.read_skeletons(o["gt"])
    if o["est"]:
        est = io.read_skeletons(o["est"])
        if len(est) != len(truth):
            raise ShapeMismatch(f"{len(est)} estimated frames vs {len(truth)} ground-truth frames")
        noisy = est.array()
    else:
        rng = np.random.default_rng(o["seed"])
        noisy = truth.array() + rng.normal(0.0, o["noise"], truth.array().shape)
    config = SmootherConfig(layers=o["layers"], cells=o["cells"], lookback=o["lookback"],
                            width=truth.array().shape[1], init_seed=o["seed"])
    state = AdadeltaState(config.rho, config.epsilon)
    model, history = train_smoother(config, [(noisy, truth.array())], o["epochs"], seed=o["seed"], state=state)
    io.save_smoother(o["out"], model, state, seed=o["seed"],
                     extra={"epochs": o["epochs"], "history": history, "noise": None if o["est"] else o["noise"]})


def _cmd_smooth(o) -> None:
    from pvhnet import io
    from pvhnet.skeleton import SkeletonFrame, SkeletonStream

    model, _, header = io.load_smoother(o["ckpt"])
    stream = io.read_skeletons(o["input"])
    if len(stream):
        if stream.array().shape[1] != model.config.width:
            raise ShapeMismatch(f"stream has {stream.array().shape[1]} coordinates, smoother expects "
                                f"{model.config.width}")
        out = model.smooth(stream.array())
        names = stream.frames[0].names
        frames = [SkeletonFrame(v.reshape(-1, 3), names) for v in out]
    else:
        frames = []
    meta = {**stream.meta, "smoother_seed": header.get("seed")}
    io.write_skeletons(o["out"], SkeletonStream(frames, stream.indices, stream.timestamps, meta))


def _subset_from_json(path):
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "subset" in doc:
        doc = doc["subset"]
    return doc


def _cmd_eval_pose(o) -> None:
    from pvhnet import io
    from pvhnet.evaluation import per_joint_error

    subset = _subset_from_json(o["subset"]) if o["subset"] else None
    report = per_joint_error(io.read_skeletons(o["est"]).frames, io.read_skeletons(o["gt"]).frames, subset)
    _json_out(o["out"], report.to_dict())
    log.info(report.summary())


def _cmd_eval_volume(o) -> None:
    from pvhnet import io
    from pvhnet.errors import LengthMismatch
    from pvhnet.evaluation import voxel_mse_report

    names = [sorted(p.name for p in Path(o[k]).glob("*.pvh")) for k in ("out_volumes", "inputs", "gt")]
    if not (names[0] == names[1] == names[2]):
        raise LengthMismatch("volume directories do not hold the same file names")
    load = lambda d: [io.read_volume(Path(d) / n) for n in names[0]]
    report = voxel_mse_report(load(o["out_volumes"]), load(o["inputs"]), load(o["gt"]))
    doc = report.to_dict()
    doc["files"] = names[0]
    _json_out(o["out"], doc)
    log.info(report.summary())


_COMMANDS = {
    "synth": _cmd_synth,
    "pvh": _cmd_pvh,
    "upscale": _cmd_upscale,
    "pretrain": lambda o: _cmd_fit(o, "pretrain"),
    "train": lambda o: _cmd_fit(o, "train"),
    "infer": _cmd_infer,
    "train-smoother": _cmd_train_smoother,
    "smooth": _cmd_smooth,
    "eval pose": _cmd_eval_pose,
    "eval volume": _cmd_eval_volume,
}

# run-time errors that still mean "the inputs were invalid"
_VALIDATION_ERRORS = (ConfigError, UnsupportedFactor, ShapeMismatch, ValueError)


def run(cfg: RunConfig) -> None:
    threads = 1 if cfg.deterministic else cfg.threads
    limits = nullcontext()
    if threads is not None:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=threads)
        kernels.set_num_threads(threads)
    with limits:
        _COMMANDS[cfg.command](cfg.options)


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
    except (ConfigError, UnsupportedFactor) as exc:
        print(f"pvhnet: error: {exc}", file=sys.stderr)
        return 1
    level = logging.WARNING - 10 * min(cfg.verbosity, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(cfg)
    except _VALIDATION_ERRORS as exc:
        print(f"pvhnet: error: {exc}", file=sys.stderr)
        return 1
    except (PVHError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"pvhnet: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, normals, train, eval, predict, export-ply.

Settings resolve as command-line flag > config file > built-in default. The
config file holds ``key = value`` lines (``#`` starts a comment) with dotted
keys such as ``train.lr``.

Exit codes: 0 success, 1 I/O or data error, 2 configuration error.
"""
import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, metrics
from .exceptions import ConfigError, PAAConvError, ParseError, ShapeError
from .network import Network, NetworkConfig, build_network
from .normals import estimate_normals
from .training import TrainConfig, train, write_history

logger = logging.getLogger("paaconv")

EXIT_OK, EXIT_IO, EXIT_CONFIG = 0, 1, 2


def _int_list(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _float_list(text):
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Setting:
    key: str
    flag: str
    type: object
    default: object
    help: str = ""

    @property
    def dest(self):
        return self.key.replace(".", "_")


SETTINGS = [
    Setting("seed", "--seed", int, 0, "master random seed"),
    Setting("network.cell_size", "--cell-size", float, 0.05, "grid cell edge in meters"),
    Setting("network.cascade_strides", "--cascade-strides", _int_list, (1, 2, 3)),
    Setting("network.cascade_channels", "--cascade-channels", _int_list, (32, 32, 64)),
    Setting("network.parallel_strides", "--parallel-strides", _int_list, (2, 4, 8)),
    Setting("network.parallel_channels", "--parallel-channels", _int_list, (64, 64, 64)),
    Setting("network.spatial_attention", "--spatial-attention", _bool, True),
    Setting("network.channel_attention", "--channel-attention", _bool, True),
    Setting("network.classes", "--num-classes", int, 0, "output classes (0: infer from data)"),
    Setting("data.channels", "--channels", int, 12, "9 or 12 input channels"),
    Setting("data.block_size", "--block-size", float, 1.0),
    Setting("data.points_per_block", "--points-per-block", int, 4096),
    Setting("normals.k", "--k-neighbors", int, 16),
    Setting("normals.center", "--center", _float_list, (0.0, 0.0, 0.0), "orientation center x,y,z"),
    Setting("train.lr", "--lr", float, 0.01),
    Setting("train.momentum", "--momentum", float, 0.9),
    Setting("train.batch_size", "--batch-size", int, 4),
    Setting("train.epochs", "--epochs", int, 200),
    Setting("train.checkpoint_every", "--checkpoint-every", int, 0),
    Setting("synth.rooms", "--rooms", int, 4),
    Setting("synth.classes", "--classes", int, 4),
    Setting("synth.points", "--points", int, 20000),
    Setting("synth.noise", "--noise", float, 0.0),
    Setting("synth.dims", "--dims", _float_list, (4.0, 4.0, 3.0), "room length,width,height"),
    Setting("synth.objects", "--objects", int, 1),
]
_BY_KEY = {s.key: s for s in SETTINGS}

COMMAND_SETTINGS = {
    "synth": ["seed", "synth.rooms", "synth.classes", "synth.points", "synth.noise",
              "synth.dims", "synth.objects"],
    "normals": ["normals.k", "normals.center"],
    "train": [k for k in _BY_KEY if not k.startswith("synth.")],
    "eval": ["seed", "data.channels", "data.block_size", "data.points_per_block", "normals.k",
             "normals.center"],
    "predict": ["seed", "data.channels", "data.block_size", "data.points_per_block", "normals.k",
                "normals.center"],
    "export-ply": [],
}


def read_config(path):
    """Parse a ``key = value`` config file into a dict of raw strings."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _BY_KEY:
                raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
            values[key] = value
    return values


def resolve_settings(args, keys, defaults=None):
    """Merge flag > config file > default for ``keys``; returns ``{key: value}``.

    ``defaults`` replaces built-in defaults for this call (``None`` marks a
    value to be taken from elsewhere, e.g. a checkpoint).
    """
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    defaults = defaults or {}
    out = {}
    for key in keys:
        s = _BY_KEY[key]
        flag_value = getattr(args, s.dest, None)
        try:
            if flag_value is not None:
                out[key] = s.type(flag_value)
            elif key in file_values:
                out[key] = s.type(file_values[key])
            else:
                out[key] = defaults.get(key, s.default)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return out


def worker_count():
    """Worker cap from ``PAACONV_THREADS``; -1 means all cores."""
    raw = os.environ.get("PAACONV_THREADS", "").strip()
    if not raw:
        return -1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PAACONV_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("PAACONV_THREADS must be >= 1")
    return n


# -- pipeline helpers -----------------------------------------------------------------

def list_clouds(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".txt")
        if not files:
            raise FileNotFoundError(f"no .txt cloud files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return [path]


def room_normals(room, cfg):
    if room.normals is not None:
        return room.normals
    normals, _ = estimate_normals(room.positions, cfg["normals.k"], cfg["normals.center"],
                                  workers=worker_count())
    return normals


def _check_common(cfg):
    if cfg.get("data.channels") is not None and cfg["data.channels"] not in (9, 12):
        raise ConfigError(f"--channels must be 9 or 12, got {cfg['data.channels']}")
    if "normals.k" in cfg and cfg["normals.k"] < 3:
        raise ConfigError("--k-neighbors must be >= 3")
    if "normals.center" in cfg and len(cfg["normals.center"]) != 3:
        raise ConfigError("--center needs three comma-separated numbers")
    if "data.block_size" in cfg and not cfg["data.block_size"] > 0:
        raise ConfigError("--block-size must be positive")
    if "data.points_per_block" in cfg and cfg["data.points_per_block"] < 1:
        raise ConfigError("--points-per-block must be positive")


def room_blocks(room, cfg, channels, cell_size, seed, cover=False):
    """Blocks of ``room`` with ``channels`` features, canonically sorted.

    ``cover=True`` returns the training partition for ``seed`` followed by
    extra blocks for every point the partition left out, so inference sees
    the same samples training did and still reaches every point.
    """
    bs, n_pts = cfg["data.block_size"], cfg["data.points_per_block"]
    blocks = data.partition_blocks(room, bs, n_pts, seed=seed)
    if cover:
        seen = np.zeros(len(room), dtype=bool)
        for b in blocks:
            seen[b.indices] = True
        blocks += data.cover_blocks(room, bs, n_pts, seed=seed, points=np.flatnonzero(~seen))
    if channels == 12:
        blocks = data.attach_normals(blocks, room_normals(room, cfg))
    return [data.canonical_sort(b, cell_size) for b in blocks]


def predict_room(net, room, cfg, seed=0):
    """Predicted label for every point of ``room``."""
    pred = np.full(len(room), -1, dtype=np.int64)
    if len(room) == 0:
        return pred
    blocks = room_blocks(room, cfg, net.config.in_channels, net.config.cell_size, seed, cover=True)
    for b in blocks:
        labels = net.predict(b.positions, b.features)
        # first occurrence wins for points repeated by padding
        _, first = np.unique(b.indices, return_index=True)
        pred[b.indices[first]] = labels[first]
    return pred


def _load_checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return Network.load(path)


def _inference_setup(args, command):
    """Resolved settings and checkpoint for eval/predict; ``--channels`` must match the checkpoint."""
    cfg = resolve_settings(args, COMMAND_SETTINGS[command], defaults={"data.channels": None})
    _check_common(cfg)
    net = _load_checkpoint(args.checkpoint)
    if cfg["data.channels"] is not None and cfg["data.channels"] != net.config.in_channels:
        raise ShapeError(
            f"checkpoint expects {net.config.in_channels} channels, got --channels {cfg['data.channels']}"
        )
    return cfg, net


def _check_rooms(net, rooms):
    n_classes = net.config.n_classes
    for path, room in rooms:
        if room.labels.max(initial=-1) >= n_classes:
            raise ShapeError(f"{path}: label exceeds the checkpoint's {n_classes} classes")


# -- commands ----------------------------------------------------------------------------

def cmd_synth(args):
    cfg = resolve_settings(args, COMMAND_SETTINGS["synth"])
    if not 1 <= cfg["synth.classes"] <= data.MAX_CLASSES:
        raise ConfigError(f"--classes must be in [1, {data.MAX_CLASSES}], got {cfg['synth.classes']}")
    if cfg["synth.rooms"] < 1:
        raise ConfigError("--rooms must be positive")
    if len(cfg["synth.dims"]) != 3:
        raise ConfigError("--dims needs three comma-separated lengths")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(cfg["synth.rooms"])
    for i, ss in enumerate(seeds):
        room = data.generate_synthetic_room(
            dims=cfg["synth.dims"], n_classes=cfg["synth.classes"], n_points=cfg["synth.points"],
            noise=cfg["synth.noise"], seed=int(ss.generate_state(1)[0]),
            n_objects=cfg["synth.objects"], floor_only=args.floor_only,
        )
        data.write_cloud(out / f"room_{i:03d}.txt", room)
    logger.info("wrote %d rooms to %s", cfg["synth.rooms"], out)
    return EXIT_OK


def cmd_normals(args):
    cfg = resolve_settings(args, COMMAND_SETTINGS["normals"])
    _check_common(cfg)
    room = data.load_cloud(args.input)
    normals, n_fallback = estimate_normals(room.positions, cfg["normals.k"], cfg["normals.center"],
                                           workers=worker_count())
    room.normals = normals
    data.write_cloud(args.out, room)
    logger.info("estimated %d normals (%d fallbacks)", len(room), n_fallback)
    return EXIT_OK


def _network_config(cfg, n_classes):
    return NetworkConfig(
        in_channels=cfg["data.channels"], n_classes=n_classes,
        cascade_strides=cfg["network.cascade_strides"], cascade_channels=cfg["network.cascade_channels"],
        parallel_strides=cfg["network.parallel_strides"], parallel_channels=cfg["network.parallel_channels"],
        cell_size=cfg["network.cell_size"], seed=cfg["seed"],
        spatial_attention=cfg["network.spatial_attention"], channel_attention=cfg["network.channel_attention"],
    )


def cmd_train(args):
    cfg = resolve_settings(args, COMMAND_SETTINGS["train"])
    _check_common(cfg)
    tcfg = TrainConfig(
        learning_rate=cfg["train.lr"], momentum=cfg["train.momentum"], batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"], seed=cfg["seed"], checkpoint_every=cfg["train.checkpoint_every"],
    ).validate()
    n_classes = cfg["network.classes"]
    if n_classes < 0 or n_classes > data.MAX_CLASSES:
        raise ConfigError(f"--num-classes must be in [0, {data.MAX_CLASSES}]")
    # validate topology before touching any data
    _network_config(cfg, n_classes or 1).validate()

    rooms = [(p, data.load_cloud(p)) for p in list_clouds(args.data)]
    if n_classes == 0:
        n_classes = int(max(r.labels.max(initial=-1) for _, r in rooms)) + 1
        if n_classes < 1:
            raise PAAConvError("training data has no labeled points")
    ncfg = _network_config(cfg, n_classes)
    blocks = []
    for i, (path, room) in enumerate(rooms):
        blocks.extend(room_blocks(room, cfg, ncfg.in_channels, ncfg.cell_size, seed=cfg["seed"] + i))
    if not blocks:
        raise PAAConvError("no block holds enough points to train on")
    net = build_network(ncfg)
    checkpoint = Path(args.checkpoint)

    def on_epoch_end(state):
        logger.info("epoch %d loss %.5f oa %.4f", state.epoch, state.history[-1].mean_loss,
                    state.history[-1].train_oa)
        if tcfg.checkpoint_every and state.epoch % tcfg.checkpoint_every == 0:
            net.save(checkpoint)

    state = train(net, blocks, tcfg, on_epoch_end=on_epoch_end)
    net.save(checkpoint)
    history = Path(args.out) if args.out else checkpoint.with_suffix(".history.csv")
    write_history(history, state.history)
    return EXIT_OK


def _evaluate_rooms(net, rooms, cfg):
    cm = metrics.confusion_matrix(net.config.n_classes)
    for i, (_, room) in enumerate(rooms):
        metrics.accumulate(cm, room.labels, predict_room(net, room, cfg, seed=cfg["seed"] + i))
    return cm


def cmd_eval(args):
    cfg, net = _inference_setup(args, "eval")
    rooms = [(p, data.load_cloud(p)) for p in list_clouds(args.data)]
    for path, room in rooms:
        if not (room.labels >= 0).any():
            raise ConfigError(f"{path} has no labeled points; cannot evaluate")
    _check_rooms(net, rooms)
    cm = _evaluate_rooms(net, rooms, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out / "metrics.csv", cm, data.CLASS_NAMES)
    metrics.write_confusion_csv(out / "confusion.csv", cm)
    print(f"OA {metrics.overall_accuracy(cm):.4f}  mAcc {metrics.mean_class_accuracy(cm):.4f}  "
          f"mIoU {metrics.mean_iou(cm):.4f}")
    return EXIT_OK


def cmd_predict(args):
    cfg, net = _inference_setup(args, "predict")
    room = data.load_cloud(args.input)
    pred = predict_room(net, room, cfg, seed=cfg["seed"])
    data.write_cloud(args.out, room, labels=pred)
    if args.ply:
        data.write_ply(Path(args.out).with_suffix(".ply"), room.positions, pred)
    return EXIT_OK


def cmd_export_ply(args):
    room = data.load_cloud(args.input)
    data.write_ply(args.out, room.positions, room.labels)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "normals": cmd_normals, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "export-ply": cmd_export_ply,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="paaconv", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_SETTINGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        for key in keys:
            s = _BY_KEY[key]
            p.add_argument(s.flag, dest=s.dest, default=None, help=s.help or None)
        if name == "synth":
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--floor-only", action="store_true")
        elif name in ("normals", "predict", "export-ply"):
            p.add_argument("--input", required=True)
            p.add_argument("--out", required=True)
        elif name == "train":
            p.add_argument("--data", required=True, help="cloud file or directory of .txt clouds")
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--out", help="loss history CSV (default: next to the checkpoint)")
        elif name == "eval":
            p.add_argument("--data", required=True)
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--out", required=True, help="directory for metrics.csv and confusion.csv")
        if name == "predict":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--ply", action="store_true", help="also write a colored PLY")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"paaconv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"paaconv: incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, PAAConvError) as exc:
        print(f"paaconv: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

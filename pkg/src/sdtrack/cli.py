"""Command-line entry point: ``sdtrack <command> [options]``.

Option values resolve as defaults < ``--config`` file (TOML) < flags. Every
command prints a banner with the resolved-config hash and seed, exits 0 on
success, and removes the outputs it created if it fails.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import events as ev
from . import gtp
from .evaluation import SequenceResult, compute_metrics, model_predictor, oracle_predictor, run_sequences
from .model import PRESETS, SDTrack
from .profiler import model_energy
from .weights import load_weights, save_weights

logger = logging.getLogger("sdtrack")

# per command: option -> default. Flags default to None so the chain can tell
# "not given" from "given as the default".
DEFAULTS = {
    "gen": {"width": 128, "height": 128, "n_frames": 30, "frame_us": 10_000, "max_speed": 3.0,
            "moving_fraction": 0.75, "noise_rate": 20.0, "format": "csv"},
    "aggregate": {"method": "gtp", "alpha": gtp.DEFAULT_ALPHA, "beta": gtp.DEFAULT_BETA, "window_us": 10_000,
                  "T": 1, "width": 128, "height": 128, "preview": False},
    "track": {"method": "gtp", "alpha": gtp.DEFAULT_ALPHA, "beta": gtp.DEFAULT_BETA, "window_us": 10_000,
              "width": 128, "height": 128, "mode": "infer"},
    "train-toy": {"steps": 3000, "batch_size": 8, "lr": 1e-3, "weight_decay": 1e-4, "eval_every": 500,
                  "n_eval": 20, "method": "gtp", "alpha": gtp.DEFAULT_ALPHA, "beta": gtp.DEFAULT_BETA},
    "energy": {"preset": "tiny", "T": 1, "window_us": 10_000, "width": 346, "height": 260,
               "alpha": gtp.DEFAULT_ALPHA, "beta": gtp.DEFAULT_BETA},
    "eval": {},
}


class CliError(Exception):
    pass


class Outputs:
    """Tracks files and directories a command creates so a failure can
    remove them."""

    def __init__(self):
        self.created: list[Path] = []

    def file(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            self.created.append(p)
        if p.parent and not p.parent.exists():
            self.dir(p.parent)
        return p

    def dir(self, path) -> Path:
        p = Path(path)
        missing = []
        q = p
        while not q.exists():
            missing.append(q)
            q = q.parent
        self.created.extend(reversed(missing))
        p.mkdir(parents=True, exist_ok=True)
        return p

    def cleanup(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < flags. Unknown config keys are rejected."""
    defaults = DEFAULTS[args.command]
    file_cfg = _load_config_file(args.config)
    section = file_cfg.pop(args.command.replace("-", "_"), None)
    if isinstance(section, dict):
        file_cfg.update({k.replace("-", "_"): v for k, v in section.items()})
    unknown = sorted(set(file_cfg) - set(defaults) - {"seed"})
    if unknown:
        raise CliError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    out = dict(defaults)
    out["seed"] = 0
    out.update(file_cfg)
    for k in list(out):
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def banner(command: str, cfg: dict) -> None:
    print(f"sdtrack {command} config_hash={config_hash(cfg)} seed={cfg['seed']}")


def _check_gtp(cfg: dict) -> None:
    if cfg["alpha"] <= 0:
        raise CliError("--alpha must be > 0")
    if not 0 <= cfg["beta"] <= 1:
        raise CliError("--beta must be in [0, 1]")


# -- commands ---------------------------------------------------------------

def cmd_gen(args, cfg, outs: Outputs) -> None:
    rng = np.random.default_rng(cfg["seed"])
    scfg = ev.random_sequence_config(rng, width=cfg["width"], height=cfg["height"], n_frames=cfg["n_frames"],
                                     max_speed=cfg["max_speed"], moving_fraction=cfg["moving_fraction"],
                                     noise_rate=cfg["noise_rate"], frame_us=cfg["frame_us"])
    seq = ev.generate_synthetic_sequence(scfg)
    ev.write_event_file(outs.file(args.out), seq.events, format=cfg["format"])
    gt_path = args.gt or str(Path(args.out).with_suffix(".gt.csv"))
    ev.write_ground_truth(outs.file(gt_path), seq.boxes)
    print(f"wrote {len(seq.events)} events, {len(seq.boxes)} frames -> {args.out}, {gt_path}")


def _windows(path, cfg, T: int, n_frames: int | None = None):
    events = ev.read_events(path)
    ev.validate_events(events, cfg["width"], cfg["height"])
    return ev.window_stream(events, cfg["window_us"], T, width=cfg["width"], height=cfg["height"],
                            n_frames=n_frames)


def cmd_aggregate(args, cfg, outs: Outputs) -> None:
    _check_gtp(cfg)
    if cfg["method"] not in ("gtp", "event_frame", "event_count"):
        raise CliError(f"unknown method {cfg['method']!r}")
    windows = _windows(args.events, cfg, cfg["T"])
    outdir = outs.dir(args.out)
    agg = gtp.Aggregator(cfg["method"], cfg["alpha"], cfg["beta"])
    T = cfg["T"]
    for i, w in enumerate(windows):
        img = agg(w)
        stem = f"frame_{i // T:05d}_{i % T}" if T > 1 else f"frame_{i:05d}"
        gtp.write_raw(outs.file(outdir / f"{stem}.raw"), img)
        if cfg["preview"]:
            gtp.write_preview(outs.file(outdir / f"{stem}.png"), img)
        nz = [int(np.count_nonzero(c)) for c in img.channels]
        print(f"{stem} events={len(w)} nonzero={nz[0]},{nz[1]},{nz[2]} max_ch3={img.channels[2].max():.6g}")


def _first_box(gt: list[ev.GroundTruthBox]) -> ev.GroundTruthBox:
    if not gt:
        raise CliError("ground-truth file has no rows")
    if gt[0].frame != 0:
        raise CliError("first ground-truth row must annotate frame 0")
    return gt[0]


def cmd_track(args, cfg, outs: Outputs) -> None:
    _check_gtp(cfg)
    gt = ev.read_ground_truth(args.gt)
    first = _first_box(gt)
    if args.oracle:
        T, sizes = 1, (32, 64)
        predictor = oracle_predictor([gt])
    else:
        if not args.weights:
            raise CliError("track needs --weights or --oracle")
        model = load_weights(args.weights)
        T, sizes = model.config.T, (model.config.template_size, model.config.search_size)
        predictor = model_predictor(model, cfg["mode"])
    windows = _windows(args.events, cfg, T, n_frames=len(gt) if len(gt) > 1 else None)
    scale = cfg["alpha"] if cfg["method"] == "event_frame" else 1.0
    images = gtp.aggregate_sequence(windows, T, cfg["method"], cfg["alpha"], cfg["beta"], scale)
    F = images.shape[0]
    gt_all = gt[:F] if len(gt) >= F else None
    if args.oracle and gt_all is None:
        raise CliError("--oracle needs ground truth for every frame")
    res = run_sequences(predictor, [images], [first], template_size=sizes[0], search_size=sizes[1],
                        gt_boxes=[gt_all] if gt_all else None)[0]
    res.write_csv(outs.file(args.out))
    if gt_all:
        m = compute_metrics(res)
        print(f"frames={len(res.pred)} mean_iou={res.mean_iou:.6f} auc={m.auc:.6f} pr={m.pr:.6f}")
    else:
        print(f"frames={len(res.pred)} (no ground truth beyond frame 0)")


def cmd_train_toy(args, cfg, outs: Outputs) -> None:
    from .model import toy_config
    from .training import DataConfig, OptimizerConfig, TrainConfig, train_toy

    _check_gtp(cfg)
    outdir = outs.dir(args.out)
    data = DataConfig(method=cfg["method"], alpha=cfg["alpha"], beta=cfg["beta"], seed=cfg["seed"])
    train = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], eval_every=cfg["eval_every"],
                        n_eval=cfg["n_eval"], seed=cfg["seed"],
                        optimizer=OptimizerConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"]))
    model = SDTrack(toy_config(), rng=cfg["seed"])
    log_path = outs.file(outdir / "report.jsonl")
    model, report = train_toy(model, data, train, log_path=log_path)
    save_weights(model, outs.file(outdir / "weights.sdtw"))
    summary = {"final_mean_iou": report.final_iou, "final_auc": report.final_auc, "steps": cfg["steps"],
               "config_hash": config_hash(cfg), "seed": cfg["seed"]}
    with open(outs.file(outdir / "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"final mean IoU {report.final_iou:.6f} AUC {report.final_auc:.6f}")


def cmd_energy(args, cfg, outs: Outputs) -> None:
    _check_gtp(cfg)
    if args.weights:
        model = load_weights(args.weights)
    else:
        if cfg["preset"] not in PRESETS:
            raise CliError(f"unknown preset {cfg['preset']!r}")
        model = SDTrack(PRESETS[cfg["preset"]](T=cfg["T"]), rng=cfg["seed"])
    c = model.config
    rng = np.random.default_rng(cfg["seed"])
    if args.events:
        windows = _windows(args.events, cfg, c.T)
        images = gtp.aggregate_sequence(windows, c.T, "gtp", cfg["alpha"], cfg["beta"])
        if len(images) < 2:
            raise CliError("energy needs at least two frames of events")
        from .crops import SEARCH_CONTEXT, TEMPLATE_CONTEXT, CropWindow, crop

        box = (cfg["width"] / 2, cfg["height"] / 2, c.template_size / TEMPLATE_CONTEXT,
               c.template_size / TEMPLATE_CONTEXT)
        if args.gt:
            b = _first_box(ev.read_ground_truth(args.gt))
            box = (b.cx, b.cy, b.w, b.h)
        zw = CropWindow.around(box, TEMPLATE_CONTEXT, c.template_size)
        xw = CropWindow.around(box, SEARCH_CONTEXT, c.search_size)
        z = np.stack([crop(images[0, t] / 255.0, zw) for t in range(c.T)])[:, None]
        x = np.stack([crop(images[1, t] / 255.0, xw) for t in range(c.T)])[:, None]
    else:
        # sparse synthetic event image: 5% of pixels active
        def sparse(n):
            return (rng.random((c.T, 1, 3, n, n)) < 0.05) * rng.uniform(0.1, 0.6, (c.T, 1, 3, n, n))
        z, x = sparse(c.template_size), sparse(c.search_size)
    z, x = z.astype(np.float32), x.astype(np.float32)
    if not args.weights:
        # untrained weights: take BN statistics from this input so neurons fire
        model.calibrate_bn(z, x)
    report = model_energy(model, z, x)
    report.write_json(outs.file(args.out))
    if args.csv:
        report.write_csv(outs.file(args.csv))
    print(f"energy total {report.total_mj:.6f} mJ (MAC {report.mac_pj * 1e-9:.6f} mJ, "
          f"AC {report.ac_pj * 1e-9:.6f} mJ; dense-SSA variant {report.literal_total_pj * 1e-9:.6f} mJ), "
          f"T={report.T}")


def cmd_eval(args, cfg, outs: Outputs) -> None:
    res = SequenceResult.read_csv(args.results)
    if args.gt:
        gt = {b.frame: (b.cx, b.cy, b.w, b.h) for b in ev.read_ground_truth(args.gt)}
        missing = [f for f in res.frames if f not in gt]
        if missing:
            raise CliError(f"ground truth lacks frames {missing[:5]}")
        res = SequenceResult(res.pred, [gt[f] for f in res.frames], 0, 0, res.frames)
    summary = compute_metrics(res)
    if args.out:
        summary.write_json(outs.file(args.out))
    print(f"AUC {summary.auc:.6f} PR {summary.pr:.6f} frames {summary.n_frames}")


COMMANDS = {"gen": cmd_gen, "aggregate": cmd_aggregate, "track": cmd_track, "train-toy": cmd_train_toy,
            "energy": cmd_energy, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdtrack", description="Event-based spiking tracker toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML file with option values")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("gen", help="generate a synthetic moving-square event sequence"))
    g.add_argument("--out", required=True, help="event file to write")
    g.add_argument("--gt", help="ground-truth CSV to write (default: <out>.gt.csv)")
    g.add_argument("--format", choices=["csv", "packed"])
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--n-frames", dest="n_frames", type=int)
    g.add_argument("--frame-us", dest="frame_us", type=int)
    g.add_argument("--max-speed", dest="max_speed", type=float)
    g.add_argument("--moving-fraction", dest="moving_fraction", type=float)
    g.add_argument("--noise-rate", dest="noise_rate", type=float)

    def gtp_flags(sp, methods=True):
        if methods:
            sp.add_argument("--method", choices=["gtp", "event_frame", "event_count"])
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--window-us", dest="window_us", type=int)
        sp.add_argument("--width", type=int)
        sp.add_argument("--height", type=int)

    a = common(sub.add_parser("aggregate", help="aggregate events into event images"))
    a.add_argument("events")
    a.add_argument("--out", required=True, help="output directory")
    gtp_flags(a)
    a.add_argument("--T", type=int)
    a.add_argument("--preview", action="store_true", default=None, help="also write 8-bit PNG previews")

    t = common(sub.add_parser("track", help="track through an event file"))
    t.add_argument("--weights")
    t.add_argument("--oracle", action="store_true", help="predict the ground truth (harness check)")
    t.add_argument("--events", required=True)
    t.add_argument("--gt", required=True, help="ground-truth CSV; frame 0 initializes the tracker")
    t.add_argument("--out", required=True, help="results CSV")
    t.add_argument("--mode", choices=["infer", "eval"])
    gtp_flags(t)

    tr = common(sub.add_parser("train-toy", help="train the toy model on synthetic sequences"))
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", dest="weight_decay", type=float)
    tr.add_argument("--eval-every", dest="eval_every", type=int)
    tr.add_argument("--n-eval", dest="n_eval", type=int)
    tr.add_argument("--method", choices=["gtp", "event_frame", "event_count"])
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--beta", type=float)

    e = common(sub.add_parser("energy", help="theoretical energy report"))
    e.add_argument("--weights")
    e.add_argument("--preset", choices=sorted(PRESETS))
    e.add_argument("--T", type=int)
    e.add_argument("--events")
    e.add_argument("--gt")
    e.add_argument("--out", required=True, help="report JSON")
    e.add_argument("--csv", help="per-layer CSV")
    gtp_flags(e, methods=False)

    v = common(sub.add_parser("eval", help="AUC and PR for a results CSV"))
    v.add_argument("--results", required=True)
    v.add_argument("--gt")
    v.add_argument("--out", help="summary JSON")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SDTRACK_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    outs = Outputs()
    try:
        cfg = resolve(args)
        banner(args.command, cfg)
        COMMANDS[args.command](args, cfg, outs)
    except (CliError, ValueError, OSError, KeyError, tomllib.TOMLDecodeError) as exc:
        outs.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        outs.cleanup()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())

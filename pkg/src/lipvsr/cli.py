"""``lipvsr`` command line: synthetic data, degradation, training, inference,
evaluation, certification and STRF diagnosis.

Every subcommand accepts ``--config`` (TOML or JSON). Config sections are
``data``, ``degrade``, ``model``, ``train``, ``corpus``, ``eval`` and ``strf``
plus the top-level keys ``seed`` and ``out``. Unknown keys are rejected.
Command-line flags override config values, and each run writes the resolved
configuration as ``resolved_config.json`` next to its outputs. That file is a
valid config itself; its ``command`` and ``run`` entries are informational
and ignored on load.

Exit codes: 0 success, 1 runtime/domain failure, 2 usage or configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import evalsuite, lipschitz, models, training, videodata
from .errors import ConfigError, LipvsrError, UsageError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("lipvsr")

SECTIONS = ("data", "degrade", "model", "train", "corpus", "eval", "strf")
CORPUS_DEFAULTS = {"n_sequences": 16, "length": 24, "size": 96, "seed": 100}
EVAL_DEFAULTS = {"with_ssim": True, "window": evalsuite.WINDOW, "profile_row": None}
MODEL_KEYS = {"preset", "f", "s", "n_xi", "n_phi", "n_psi", "T", "alpha", "beta", "feature_shifting", "residual"}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        if p.suffix.lower() == ".json":
            cfg = json.loads(p.read_text())
        else:
            with p.open("rb") as fh:
                cfg = tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    unknown = set(cfg) - set(SECTIONS) - {"seed", "out", "command", "run"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for name in SECTIONS:
        if name in cfg and not isinstance(cfg[name], dict):
            raise ConfigError(f"config section [{name}] must be a table")
    return cfg


def _check_keys(section: str, values: dict, allowed) -> None:
    unknown = set(values) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _merge(section: str, cfg: dict, overrides: dict, allowed) -> dict:
    """Config section overlaid with the flags that were actually given."""
    merged = dict(cfg.get(section, {}))
    _check_keys(section, merged, allowed)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _common(args, cfg: dict) -> tuple[int, Path]:
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = args.out if args.out is not None else cfg.get("out")
    if out is None:
        raise UsageError("an output location is required (--out or 'out' in the config)")
    return seed, Path(out)


def _write_resolved(out_dir: Path, command: str, seed: int, sections: dict, run: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "seed": seed, "out": str(out_dir), **sections}
    if run:
        payload["run"] = run
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _require_dir(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{flag} directory {p} does not exist")
    return p


def _require_file(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{flag} file {p} does not exist")
    return p


def _model_spec(section: dict) -> models.NetworkSpec:
    _check_keys("model", section, MODEL_KEYS)
    section = dict(section)
    name = section.pop("preset", "mrvsr")
    spec = models.preset(name, f=section.pop("f", 128), s=section.pop("s", 4))
    try:
        return replace(spec, **section)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth_data(args, cfg) -> int:
    seed, out = _common(args, cfg)
    data = _merge(
        "data",
        cfg,
        {"length": args.length, "height": args.height, "width": args.width, "velocity": args.velocity,
         "jitter_amp": args.jitter},
        _field_names(videodata.SyntheticSceneConfig),
    )
    data.setdefault("background_seed", seed)
    scene = videodata.SyntheticSceneConfig(**data)
    seq = videodata.synth_quasi_static(scene)
    videodata.write_frames(out, seq)
    _write_resolved(out, "synth-data", seed, {"data": asdict(scene)})
    print(f"wrote {len(seq)} frames to {out}")
    return 0


def cmd_degrade(args, cfg) -> int:
    seed, out = _common(args, cfg)
    src = _require_dir(args.frames, "--frames")
    deg = _merge("degrade", cfg, {"sigma": args.sigma, "s": args.scale}, _field_names(videodata.DegradationConfig))
    dcfg = videodata.DegradationConfig(**deg)
    lr = videodata.degrade(videodata.read_frames(src), dcfg)
    videodata.write_frames(out, lr)
    _write_resolved(out, "degrade", seed, {"degrade": asdict(dcfg)}, {"frames": str(src)})
    print(f"wrote {len(lr)} LR frames ({lr.shape[-2]}x{lr.shape[-1]}) to {out}")
    return 0


def _training_sequences(args, cfg, seed: int) -> tuple[list, dict, dict]:
    """HR training sequences, plus (config sections, run info) describing them."""
    if args.frames:
        dirs = [_require_dir(d, "--frames") for d in args.frames]
        return [videodata.read_frames(d) for d in dirs], {}, {"frames": [str(d) for d in dirs]}
    corpus = dict(CORPUS_DEFAULTS)
    corpus["seed"] = CORPUS_DEFAULTS["seed"] + seed
    corpus.update(_merge("corpus", cfg, {}, CORPUS_DEFAULTS))
    seqs = videodata.training_corpus(corpus["n_sequences"], corpus["length"], corpus["size"], seed=corpus["seed"])
    return seqs, {"corpus": corpus}, {}


def cmd_train(args, cfg) -> int:
    seed, out = _common(args, cfg)
    tsec = _merge(
        "train", cfg, {"epochs": args.epochs, "f": args.f, "n_clips": args.clips, "lr0": args.lr},
        _field_names(training.TrainConfig),
    )
    base = training.TrainConfig.desk() if args.desk else training.TrainConfig()
    tcfg = training.TrainConfig.from_dict({**base.to_dict(), **tsec, "seed": seed})
    msec = dict(cfg.get("model", {}))
    if args.model:
        msec["preset"] = args.model
    names = [n.strip() for n in str(msec.get("preset", "mrvsr")).split(",") if n.strip()]
    msec.setdefault("s", tcfg.s)
    specs = [_model_spec({**msec, "preset": n}) for n in names]
    seqs, data_sections, run_info = _training_sequences(args, cfg, seed)
    ds = training.RandomClips(seqs, tcfg)
    run_info["networks"] = [replace(s, f=tcfg.f or s.f).to_dict() for s in specs]
    _write_resolved(out, "train", seed, {"train": tcfg.to_dict(), "model": msec, **data_sections}, run_info)
    for spec in specs:
        res = training.train_network(spec, ds, tcfg, out_dir=out, resume=args.resume)
        final = res.losses[-1] if res.losses else float("nan")
        print(f"{res.spec.name}: {len(res.losses)} epochs, final loss {final:.6g}, checkpoint {res.checkpoint}")
    return 0


def cmd_infer(args, cfg) -> int:
    seed, out = _common(args, cfg)
    ckpt = _require_file(args.checkpoint, "--checkpoint")
    src = _require_dir(args.frames, "--frames")
    net = models.import_checkpoint(ckpt)
    lr = videodata.read_frames(src)
    if lr.colorspace != "RGB":
        raise UsageError("infer expects RGB LR frames")
    res = models.run_sequence(net, lr.frames)
    y = np.clip(res.outputs, 0, 1)
    s = net.spec.s
    chroma = videodata.rgb_to_ycbcr(lr.frames)[:, 1:]
    up = np.stack([videodata.bicubic_upsample(c, s) for c in chroma])
    rgb = np.clip(videodata.ycbcr_to_rgb(np.concatenate([y.astype(np.float64), up], axis=1)), 0, 1)
    videodata.write_frames(out / "y", y)
    videodata.write_frames(out / "rgb", rgb)
    if res.hidden_norms:
        with (out / "hidden_norms.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "hidden_norm"])
            w.writerows((i, repr(v)) for i, v in enumerate(res.hidden_norms))
    _write_resolved(out, "infer", seed, {}, {"checkpoint": str(ckpt), "frames": str(src), "spec": net.spec.to_dict()})
    print(f"wrote {len(y)} HR frames to {out}")
    return 0


def _as_y(seq: videodata.VideoSequence) -> np.ndarray:
    return seq.frames if seq.colorspace == "Y" else videodata.rgb_to_y(seq.frames)


def cmd_eval(args, cfg) -> int:
    seed, out = _common(args, cfg)
    pred_dir = _require_dir(args.frames, "--frames")
    gt_dir = _require_dir(args.gt, "--gt")
    esec = {**EVAL_DEFAULTS, **_merge("eval", cfg, {"profile_row": args.profile_row}, EVAL_DEFAULTS)}
    if args.no_ssim:
        esec["with_ssim"] = False
    pred, gt = _as_y(videodata.read_frames(pred_dir)), _as_y(videodata.read_frames(gt_dir))
    rec = evalsuite.evaluate_sequence(pred, gt, with_ssim=esec["with_ssim"])
    out.mkdir(parents=True, exist_ok=True)
    rec.write_csv(out / "metrics.csv")
    agg = evalsuite.windowed_metrics(rec, esec["window"])
    extra = {}
    if args.baseline is not None:
        base = evalsuite.MetricsRecord.read_csv(_require_file(args.baseline, "--baseline"))
        extra["divergence"] = evalsuite.divergence_score(rec, base, window=esec["window"]).to_dict()
    evalsuite.write_aggregates(out / "aggregates.json", agg, extra)
    if esec["profile_row"] is not None:
        evalsuite.save_gray_png(out / "temporal_profile.png", evalsuite.temporal_profile(pred, int(esec["profile_row"])))
    _write_resolved(out, "eval", seed, {"eval": esec}, {"frames": str(pred_dir), "gt": str(gt_dir)})
    for name, vals in agg.items():
        print(f"{name:>9}: PSNR {vals['psnr_y']:.3f} dB  SSIM {vals['ssim_y']:.4f}  ({vals['frames']} frames)")
    if "divergence" in extra:
        d = extra["divergence"]
        print(f"divergence: {d['diverged']} onset {d['onset_frame']} last-50 delta {d['last50_delta_db']:.3f} dB")
    return 0


def cmd_certify(args, cfg) -> int:
    ckpt = _require_file(args.checkpoint, "--checkpoint")
    net = models.import_checkpoint(ckpt)
    names = net.recurrent_layers()
    if not names:
        raise UsageError(f"{net.spec.name} has no recurrent layers to certify")
    h = args.size[0] if args.size else net.spectral_size
    w = args.size[1] if args.size else h
    ops = net.recurrent_operators(h, w)
    sigmas = lipschitz.layer_norms(ops, iters=args.iters)
    bound = float(np.prod(sigmas))
    for name, sigma in zip(names, sigmas):
        print(f"{name}\t{sigma:.6f}")
    print(f"bound\t{bound:.6f}")
    payload = {
        "checkpoint": str(ckpt),
        "input_size": [h, w],
        "iters": args.iters,
        "layers": [{"name": n, "sigma": s} for n, s in zip(names, sigmas)],
        "bound": bound,
    }
    out = Path(args.out) if args.out is not None else ckpt.with_suffix(".certify.json")
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "certify.json"
    out.write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_diagnose_strf(args, cfg) -> int:
    seed, out = _common(args, cfg)
    ckpt = _require_file(args.checkpoint, "--checkpoint")
    ssec = _merge(
        "strf", cfg, {"tau": args.tau, "iters": args.iters, "frame_size": args.frame_size},
        _field_names(evalsuite.StrfConfig),
    )
    if "drop_iters" in ssec:
        ssec["drop_iters"] = tuple(ssec["drop_iters"])
    scfg = evalsuite.StrfConfig(**ssec)
    net = models.import_checkpoint(ckpt)
    res = evalsuite.strf(net, scfg, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "strf_deviation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["relative_frame", "max_abs_deviation"])
        w.writerows((i - scfg.tau, repr(float(d))) for i, d in enumerate(res.deviation))
    strip = np.repeat(res.deviation[None, :], 8, axis=0)
    evalsuite.save_gray_png(out / "strf_deviation.png", strip, normalize=True)
    evalsuite.save_gray_png(out / "strf_centre_frame.png", videodata.rgb_to_y(res.sequence[scfg.tau])[0])
    summary = {"temporal_extent": res.temporal_extent, "stopped_at": res.stopped_at,
               "final_objective": res.objective[-1] if res.objective else None}
    (out / "strf.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_resolved(out, "diagnose-strf", seed, {"strf": asdict(scfg)}, {"checkpoint": str(ckpt)})
    if res.stopped_at is not None:
        print(f"optimization became non-finite at iteration {res.stopped_at}")
        return 1
    print(f"temporal extent: {res.temporal_extent} frames")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipvsr", description="Lipschitz-stable recurrent video super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "generate a synthetic quasi-static HR sequence")
    p.add_argument("--length", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--velocity", type=float)
    p.add_argument("--jitter", type=float, help="subpixel background jitter amplitude")

    p = add("degrade", cmd_degrade, "blur and decimate an HR frame directory")
    p.add_argument("--frames", help="HR frame directory")
    p.add_argument("--sigma", type=float)
    p.add_argument("--scale", type=int)

    p = add("train", cmd_train, "train one or more networks")
    p.add_argument("--model", help="preset name(s), comma separated: " + ", ".join(sorted(models.PRESETS)))
    p.add_argument("--frames", action="append", help="HR training sequence directory (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--f", type=int, help="feature maps per layer")
    p.add_argument("--clips", type=int, help="clips per epoch")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--desk", action="store_true", help="start from the reduced CPU profile")
    p.add_argument("--resume", action="store_true")

    p = add("infer", cmd_infer, "super-resolve an LR frame directory")
    p.add_argument("--checkpoint")
    p.add_argument("--frames", help="LR RGB frame directory")

    p = add("eval", cmd_eval, "PSNR/SSIM of predicted frames against ground truth")
    p.add_argument("--frames", help="predicted HR frame directory")
    p.add_argument("--gt", help="ground-truth HR frame directory")
    p.add_argument("--baseline", help="baseline metrics.csv for divergence scoring")
    p.add_argument("--profile-row", type=int)
    p.add_argument("--no-ssim", action="store_true")

    p = add("certify", cmd_certify, "per-layer spectral norms and the Lipschitz bound of the recurrence")
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="feature-map size to certify at")
    p.add_argument("--iters", type=int, default=100)

    p = add("diagnose-strf", cmd_diagnose_strf, "spatio-temporal receptive field probe")
    p.add_argument("--checkpoint")
    p.add_argument("--tau", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--frame-size", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"lipvsr: error: {exc}", file=sys.stderr)
        return 2
    except (LipvsrError, OSError) as exc:
        print(f"lipvsr: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

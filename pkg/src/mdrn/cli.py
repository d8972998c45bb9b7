"""Command-line entry point: mdrn {train,distill,denoise,eval,analyze,params}.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 non-finite loss.
Results go to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_run_config
from .data import IMAGE_SUFFIXES, CorpusManifest, read_image, write_image
from .degradation import NoiseSpec, PatchBatch, add_awgn, bicubic_roundtrip, degradation_roundtrip_report
from .errors import ConfigError, DataError, MDRNError
from .evaluate import denoise_image, evaluate_dataset, format_sigma_table, image_seed, self_ensemble_denoise
from .losses import DistillMode
from .metrics import psnr
from .model import MDRN, count_parameters
from .train import CheckpointRecord, distill_train, train

log = logging.getLogger("mdrn")

RUN_ROOT_ENV = "MDRN_RUN_ROOT"


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def make_run_dir(explicit, rc: RunConfig | None = None, tag: str = "run") -> Path:
    if explicit:
        path = Path(explicit)
    else:
        root = (rc.paths.run_root if rc else None) or os.environ.get(RUN_ROOT_ENV, "runs")
        digest = rc.digest() if rc else tag
        path = Path(root) / f"{time.strftime('%Y%m%d-%H%M%S')}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(path, color: str) -> CorpusManifest:
    if path is None:
        raise ConfigError("paths.train_dir is not set")
    p = Path(path)
    if p.is_dir():
        m = CorpusManifest.from_directory(p, color)
    elif p.is_file():
        m = CorpusManifest.load(p)
    else:
        raise DataError(f"corpus path not found: {p}")
    if not m.ids:
        raise DataError(f"no images in {p}")
    return m


def _val_batches(path, rc: RunConfig) -> list[PatchBatch]:
    """Validation images cropped to a multiple of 2**levels, with fixed noise."""
    m = _manifest(path, "gray" if rc.model.image_channels == 1 else "rgb")
    mult = 2 ** rc.model.levels
    spec = NoiseSpec(rc.train.sigma)
    out = []
    for image_id, img in m.images.items():
        h, w = (s - s % mult for s in img.shape[-2:])
        if h == 0 or w == 0:
            continue
        clean = torch.from_numpy(img[None, :, :h, :w].copy())
        noisy = add_awgn(clean, spec, np.random.default_rng(image_seed(rc.noise.seed, image_id, spec.sigma)))
        out.append(PatchBatch(clean, noisy, spec))
    return out


def _run_training(rc: RunConfig, args, runner, teacher=None) -> int:
    color = "gray" if rc.model.image_channels == 1 else "rgb"
    manifest = _manifest(rc.paths.train_dir, color)
    val = _val_batches(rc.paths.val_dir, rc) if rc.paths.val_dir else None
    run_dir = make_run_dir(args.run_dir, rc)
    (run_dir / "config.cfg").write_text(rc.dump())
    resume = CheckpointRecord.load(args.resume) if getattr(args, "resume", None) else None
    record = None
    for record in runner(rc.train, manifest, rc.model, run_dir=run_dir, resume=resume,
                         val_batches=val, teacher=teacher):
        h = record.history[-1]
        log.info("epoch %d  L_RL %.5f  L_KDL %.5f  lr %.3g%s", h["epoch"], h["l_rl"], h["l_kdl"], h["lr"],
                 f"  val {h['val_psnr']:.2f} dB" if "val_psnr" in h else "")
    print(f"run_dir: {run_dir}")
    print(f"checkpoint: {run_dir / 'last.pt'}")
    if record is not None:
        print(f"epochs: {record.epoch}")
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.override)
    if rc.distill.active:
        raise ConfigError("config enables distillation; use the distill command")
    return _run_training(rc, args, train)


def cmd_distill(args) -> int:
    overrides = list(args.override) + [f"distill.mode={args.mode}", f"distill.teacher_checkpoint={args.teacher}"]
    if args.teacher_sigma is not None:
        overrides.append(f"distill.teacher_sigma={args.teacher_sigma}")
    rc = load_run_config(args.config, overrides)
    teacher_record = CheckpointRecord.load(args.teacher)
    rc.distill.validate(rc.model, teacher_record.model_config)
    return _run_training(rc, args, distill_train, teacher=teacher_record.build_model())


def _load_model(path) -> tuple[MDRN, CheckpointRecord]:
    record = CheckpointRecord.load(path)
    model = record.build_model()
    model.eval()
    return model, record


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"no images in {path}")
        return files
    if not path.is_file():
        raise DataError(f"input not found: {path}")
    return [path]


def cmd_denoise(args) -> int:
    model, _ = _load_model(args.ckpt)
    color = "gray" if model.config.image_channels == 1 else "rgb"
    src = Path(args.input)
    files = _inputs(src)
    out_dir = Path(args.output) if args.output else None
    calls = [0]

    def count(*_):
        calls[0] += 1

    hook = model.register_forward_hook(count)
    written = 0
    for f in files:
        try:
            img = torch.from_numpy(read_image(f, color))
        except DataError as e:
            if len(files) == 1:
                raise
            log.warning("%s", e)
            continue
        noisy = img
        if args.sigma is not None:
            rng = np.random.default_rng(image_seed(args.seed, f.name, args.sigma))
            noisy = add_awgn(img, NoiseSpec(args.sigma), rng)
        calls[0] = 0
        out = self_ensemble_denoise(noisy, model) if args.ensemble else denoise_image(noisy, model)
        log.info("%s: %d forward passes", f.name, calls[0])
        if out_dir is None:
            out_dir = make_run_dir(None, tag="denoise")
        target = out_dir / f"{f.stem}_denoised.png"
        write_image(target, out.numpy())
        written += 1
        if args.sigma is not None:
            print(f"{f.name}\tnoisy {psnr(noisy.clamp(0, 1), img):.2f} dB\tdenoised {psnr(out, img):.2f} dB\t{target}")
        else:
            print(f"{f.name}\t{target}")
    hook.remove()
    if not written:
        raise DataError(f"no decodable images in {src}")
    return 0


def cmd_eval(args) -> int:
    model, record = _load_model(args.ckpt)
    set_dir = Path(args.set)
    if not set_dir.is_dir():
        raise DataError(f"evaluation set not found: {set_dir}")
    manifest = CorpusManifest.from_directory(set_dir, "gray" if model.config.image_channels == 1 else "rgb", "test")
    if not manifest.ids:
        raise DataError(f"no images in {set_dir}")
    run_dir = make_run_dir(args.run_dir, tag="eval")
    prov = {"checkpoint": record.digest, "set": set_dir.name}
    reports = []
    jsonl = run_dir / "report.jsonl"
    jsonl.write_text("")
    for sigma in args.sigma:
        report = evaluate_dataset(manifest, sigma, model, ensemble=args.ensemble, seed=args.seed,
                                  out_dir=run_dir if args.save_images else None, provenance=prov)
        if not report.rows:
            raise DataError(f"no decodable images in {set_dir}")
        reports.append(report)
        print(report.format_table())
        print()
        with open(jsonl, "a") as f:
            f.write(report.to_jsonl())
    name = "MDRN+" if args.ensemble else "MDRN"
    print(format_sigma_table(reports, name=name, dataset=set_dir.name))
    log.info("report written to %s", jsonl)
    return 0


def cmd_analyze(args) -> int:
    bad = [s for s in args.scales if s not in (2, 3, 4)]
    if bad:
        raise ConfigError(f"scales must be among 2,3,4 (got {bad}); scale 1 is not an analysis point")
    path = Path(args.image)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    clean = torch.from_numpy(read_image(path, args.color)).double()
    spec = NoiseSpec(args.sigma, args.seed)
    rows = degradation_roundtrip_report(clean, spec, args.scales)
    print(f"{'scale':>5}  {'noisy PSNR':>10}  {'roundtrip PSNR':>14}")
    for r in rows:
        print(f"{r.scale:>5}  {r.psnr_noisy:10.2f}  {r.psnr_roundtrip:14.2f}")
    if args.strip:
        noisy = add_awgn(clean, spec)
        panels = [clean, noisy] + [bicubic_roundtrip(noisy, s) for s in args.scales]
        write_image(args.strip, torch.cat(panels, dim=-1).numpy())
        log.info("strip written to %s", args.strip)
    return 0


def _human(n: int) -> str:
    return f"{n / 1e6:.2f}M" if n >= 1e6 else f"{n / 1e3:.0f}K"


def cmd_params(args) -> int:
    if args.ckpt:
        cfg = CheckpointRecord.load(args.ckpt).model_config
    else:
        cfg = load_run_config(args.config, args.override).model
    n = count_parameters(cfg)
    print(f"parameters: {n} ({_human(n)})")
    if args.sweep:
        for k in args.sweep:
            try:
                swept = type(cfg)(**{**cfg.to_dict(), "msab_per_msag": k})
            except ValueError as e:
                raise ConfigError(str(e)) from e
            m = count_parameters(swept)
            print(f"N={k}: {m} ({_human(m)})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdrn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. model.msab_per_msag=2 (repeatable)")

    sp = sub.add_parser("train", help="train MDRN")
    config_args(sp)
    sp.add_argument("--run-dir")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("distill", help="train a student with HADS or HMDS")
    config_args(sp)
    sp.add_argument("--teacher", required=True, help="frozen teacher checkpoint")
    sp.add_argument("--mode", required=True, choices=[m.value for m in DistillMode if m is not DistillMode.NONE])
    sp.add_argument("--teacher-sigma", type=float)
    sp.add_argument("--run-dir")
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("denoise", help="denoise an image or a directory")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--sigma", type=float, help="corrupt clean inputs first and report PSNR")
    sp.add_argument("--ensemble", action="store_true", help="8-way dihedral self-ensemble")
    sp.add_argument("--output")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("eval", help="PSNR/SSIM over a test set")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--set", required=True, help="directory of clean test images")
    sp.add_argument("--sigma", type=_floats, default=[15.0, 25.0, 50.0])
    sp.add_argument("--ensemble", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--run-dir")
    sp.add_argument("--save-images", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="bicubic degradation/reconstruction roundtrip")
    sp.add_argument("--image", required=True)
    sp.add_argument("--sigma", type=float, default=50.0)
    sp.add_argument("--scales", type=_ints, default=[2, 3, 4])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--color", choices=["gray", "rgb"], default="gray")
    sp.add_argument("--strip", help="write clean|noisy|roundtrips side by side")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("params", help="parameter count")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--config")
    g.add_argument("--ckpt")
    sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--sweep", type=_ints, help="also report counts for these N")
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except MDRNError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # bad argument values that surfaced below the CLI layer
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())

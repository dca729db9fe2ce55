"""Command-line interface: train / encode / decode / eval and the experiment tools.

Every command writes its outputs atomically (temp file + rename), so a failed
run never leaves a partial file behind.  Errors exit with status 1 and a
one-line message on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from fractions import Fraction
from pathlib import Path

import torch

from . import data
from .deform import CostModel, com_cost
from .entropy.bitstream import Bitstream
from .metrics import RdPoint, bdbr, ms_ssim, ms_ssim_scales, psnr_capped, rd_curve
from .nets import DESK, VARIANTS, HDCVC
from .pipeline.checkpoint import load_checkpoint, save_checkpoint
from .pipeline.codec import GopConfig, decode_sequence, encode_sequence, quantize_8bit, rd_point
from .pipeline.losses import RdLambda
from .pipeline.training import TrainConfig, train, train_stages

log = logging.getLogger("hdcvc")

REPORT_FIELDS = ("frame_index", "bpp", "psnr_db", "msssim")
RD_FIELDS = ("lambda_index", "bpp", "quality")


class CliError(Exception):
    pass


# ----------------------------------------------------------------------------
# atomic output helpers


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_bytes(fields, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    w.writerows(rows)
    return buf.getvalue().encode()


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def read_rd_csv(path) -> list[RdPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not set(RD_FIELDS) <= set(rows[0]):
        raise CliError(f"{path}: expected columns {','.join(RD_FIELDS)}")
    return rd_curve(RdPoint(float(r["bpp"]), float(r["quality"])) for r in rows)


def _frame_quality_rows(frames, refs, bpps):
    rows = []
    for i, (x, r) in enumerate(zip(frames, refs)):
        x8 = quantize_8bit(x).double()
        rd = r.double()
        ms = float(ms_ssim(x8, rd)) if ms_ssim_scales(*r.shape[2:]) else float("nan")
        rows.append([i, _fmt(bpps[i]), _fmt(psnr_capped(x8, rd)), _fmt(ms)])
    return rows


# ----------------------------------------------------------------------------
# commands


def cmd_synth(a) -> None:
    frames = data.synth_clip(a.pattern, a.frames, a.size, a.seed, a.dx, a.dy, a.degrees)
    data.save_sequence(frames, a.out)
    print(f"wrote {len(frames)} frames to {a.out}")


def cmd_train(a) -> None:
    clips = data.load_clips(a.data)
    if a.init:
        model, meta = load_checkpoint(a.init)
    else:
        torch.manual_seed(a.seed)
        model, meta = HDCVC(DESK.with_variant(a.variant)), {}
    lam = RdLambda(a.lambda_index, a.metric)
    cfg = TrainConfig(stage=a.stage, steps=a.steps, lam=lam, seed=a.seed, lr=a.lr, batch=a.batch, crop=a.crop)
    res = train(model, clips, cfg)
    history = list(meta.get("stages", [])) + [{"stage": a.stage, "steps": a.steps, "seed": a.seed}]
    save_checkpoint(model, a.out, {"lambda_index": a.lambda_index, "metric": a.metric, "stages": history})
    first, last = res.window_means()
    print(f"stage {a.stage}: {a.steps} steps, RD loss {first:.4f} -> {last:.4f}; saved {a.out}")


def cmd_encode(a) -> None:
    model, meta = load_checkpoint(a.ckpt)
    frames = data.load_sequence(a.inp)
    h, w = frames[0].shape[2:]
    gop = GopConfig(a.intra_period, len(frames), w, h)
    lam_idx = a.lambda_index if a.lambda_index is not None else int(meta.get("lambda_index", 0))
    res = encode_sequence(frames, model, gop, lam_idx, mfer=not a.no_mfer)
    _atomic_write(a.out, res.bitstream.to_bytes())
    if a.report:
        rows = _frame_quality_rows(res.shown, frames, [s.bpp for s in res.stats])
        _atomic_write(a.report, _csv_bytes(REPORT_FIELDS, rows))
    print(f"{len(frames)} frames, {res.bitstream.total_bytes()} bytes, {res.bpp:.4f} bpp")


def cmd_decode(a) -> None:
    model, _ = load_checkpoint(a.ckpt)
    bs = Bitstream.from_bytes(Path(a.inp).read_bytes())
    frames = decode_sequence(bs, model, mfer=not a.no_mfer)
    data.save_sequence(frames, a.out)
    print(f"decoded {len(frames)} frames to {a.out}")


def cmd_eval(a) -> None:
    ref = data.load_sequence(a.ref)
    dist = data.load_sequence(a.dist)
    if len(ref) != len(dist):
        raise CliError(f"frame count mismatch: {len(ref)} reference vs {len(dist)} distorted")
    if ref[0].shape != dist[0].shape:
        raise CliError(f"extent mismatch: {tuple(ref[0].shape[2:])} vs {tuple(dist[0].shape[2:])}")
    if a.bitstream:
        bs = Bitstream.from_bytes(Path(a.bitstream).read_bytes())
        if bs.frame_count != len(ref):
            raise CliError("bitstream frame count does not match the sequences")
        px = bs.width * bs.height
        bpps = [8.0 * r.num_bytes / px for r in bs.records]
    else:
        bpps = [float("nan")] * len(ref)
    rows = _frame_quality_rows(dist, ref, bpps)
    _atomic_write(a.report, _csv_bytes(REPORT_FIELDS, rows))
    mean_psnr = sum(float(r[2]) for r in rows) / len(rows)
    print(f"{len(rows)} frames, mean PSNR {mean_psnr:.4f} dB")


def cmd_rdcurve(a) -> None:
    clips = data.load_clips(a.inp)
    rows = []
    for path in a.ckpt_list:
        model, meta = load_checkpoint(path)
        idx = int(meta.get("lambda_index", 0))
        metric = meta.get("metric", a.metric)
        p = rd_point(model, clips, idx, metric, mfer=not a.no_mfer)
        rows.append((idx, p["bpp"], p["quality"]))
    rows.sort(key=lambda r: r[1])
    _atomic_write(a.report, _csv_bytes(RD_FIELDS, [[i, _fmt(b), _fmt(q)] for i, b, q in rows]))
    print(f"{len(rows)} RD points written to {a.report}")


def cmd_bdbr(a) -> None:
    value = bdbr(read_rd_csv(a.anchor), read_rd_csv(a.test))
    print(f"{value:.4f}")


def cmd_cost_report(a) -> None:
    params = {"height": a.height, "width": a.width, "in_channels": a.in_channels, "out_channels": a.out_channels,
              "bilinear": a.bilinear}
    if a.config:
        with open(a.config) as fh:
            params.update(json.load(fh))
    kinds = [("1x1", "single", 1), ("3x3", "single", 3), ("5x5", "single", 5), ("het", "het", 3)]
    costs = {}
    print("kernel  com_cost  ratio_vs_3x3")
    for label, kind, k in kinds:
        costs[label] = com_cost(CostModel(kind=kind, kernel=k, **params))
    for label, _, _ in kinds:
        c = costs[label]
        ratio = Fraction(c) / costs["3x3"]
        print(f"{label:<6}  {c}  {ratio}")


def cmd_ablate(a) -> None:
    clips = data.load_clips(a.data)
    eval_clips = data.load_clips(a.eval) if a.eval else clips
    lam = RdLambda(a.lambda_index, a.metric)
    torch.manual_seed(a.seed)
    model = HDCVC(DESK.with_variant(a.variant))
    schedule = [(1, a.steps1), (2, a.steps2)]
    if a.steps3:
        schedule.append((3, a.steps3))
    train_stages(model, clips, schedule, lam, a.seed)
    p = rd_point(model, eval_clips, a.lambda_index, a.metric, mfer=model.mfer is not None)
    if a.ckpt_out:
        save_checkpoint(model, a.ckpt_out, {"lambda_index": a.lambda_index, "metric": a.metric, "variant": a.variant})
    row = [a.variant, _fmt(p["bpp"]), _fmt(p["distortion"]), _fmt(p["quality"])]
    payload = _csv_bytes(("variant", "bpp", "distortion", "quality"), [row])
    if a.report:
        _atomic_write(a.report, payload)
    sys.stdout.write(payload.decode())


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdcvc", description="Desk-scale learned video codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--lambda-index", type=int, default=2, choices=range(4))
    s.add_argument("--metric", choices=("psnr", "msssim"), default="psnr")
    s.add_argument("--data", required=True, help="frame directory, or directory of clip directories")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="checkpoint to continue from (previous stage)")
    s.add_argument("--variant", choices=VARIANTS, default="het", help="architecture when starting fresh")
    s.add_argument("--lr", type=float, default=TrainConfig.lr)
    s.add_argument("--batch", type=int, default=TrainConfig.batch)
    s.add_argument("--crop", type=int, default=TrainConfig.crop)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("encode", help="encode a frame directory to a bitstream")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--intra-period", type=int, default=12)
    s.add_argument("--lambda-index", type=int, default=None, help="header value (default: the checkpoint's)")
    s.add_argument("--report", help="per-frame CSV: " + ",".join(REPORT_FIELDS))
    s.add_argument("--no-mfer", action="store_true", help="skip decoder-side enhancement (bits unchanged)")
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("decode", help="decode a bitstream to numbered PNG frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-mfer", action="store_true")
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("eval", help="per-frame quality of a distorted sequence")
    s.add_argument("--ref", required=True)
    s.add_argument("--dist", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--bitstream", help="fills the bpp column")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("rdcurve", help="one RD point per checkpoint")
    s.add_argument("--ckpt-list", nargs="+", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--metric", choices=("psnr", "msssim"), default="psnr")
    s.add_argument("--no-mfer", action="store_true")
    s.set_defaults(fn=cmd_rdcurve)

    s = sub.add_parser("bdbr", help="Bjontegaard delta rate of test vs anchor (percent)")
    s.add_argument("--anchor", required=True)
    s.add_argument("--test", required=True)
    s.set_defaults(fn=cmd_bdbr)

    s = sub.add_parser("cost-report", help="compensation cost table")
    s.add_argument("--config", help="JSON with any of height, width, in_channels, out_channels, bilinear")
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--in-channels", type=int, default=3)
    s.add_argument("--out-channels", type=int, default=3)
    s.add_argument("--bilinear", type=int, default=1)
    s.set_defaults(fn=cmd_cost_report)

    s = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    s.add_argument("--variant", choices=VARIANTS, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--eval", help="evaluation clips (default: the training data)")
    s.add_argument("--lambda-index", type=int, default=2, choices=range(4))
    s.add_argument("--metric", choices=("psnr", "msssim"), default="psnr")
    s.add_argument("--steps1", type=int, default=2000)
    s.add_argument("--steps2", type=int, default=2000)
    s.add_argument("--steps3", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.add_argument("--ckpt-out")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("synth", help="write a synthetic clip")
    s.add_argument("--pattern", choices=("translate", "rotate", "noise"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=13)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dx", type=int, default=1)
    s.add_argument("--dy", type=int, default=0)
    s.add_argument("--degrees", type=float, default=2.0)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("HDCVC_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        args.fn(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"hdcvc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

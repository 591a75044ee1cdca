"""Command-line entry point.

Subcommands: synth (generate perturbation sequences), flow (dense flow and
dual matching for a frame pair), stb (stability rate of a prediction
sequence), loss (coherency losses and gradients for a frame pair), and
report (render metric reports as an aligned table).

Every run writes a key=value manifest echoing the fully resolved
configuration; feeding a manifest back through --config reproduces the
run. Configuration precedence is flags, then config file, then built-in
defaults. Exit status is 0 on success, 2 for usage or input errors, and 1
for internal invariant violations.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, codecs
from .core import FlowField, LabelMap, LossConfig, SoftmaxMap, argmax_labels
from .flow import FlowParams, compute_flow, forward_backward_check
from .losses import FramePair, total_loss
from .metrics import RegionSpec, mae, miou, stb
from .synth import generate_sequence, load_sequence, save_sequence

__all__ = ["main", "run", "build_parser", "UsageError", "render_table"]

DEFAULTS: dict[str, object] = {
    "theta": 15,
    "gamma": 0.05,
    "alpha": 1.0,
    "beta": 5e-5,
    "fb_epsilon": 1.0,
    "band": 15,
    "length": 11,
    "seed": 0,
    "levels": 4,
    "window": 10,
    "iterations": 10,
    "min_eigen": 1e-4,
}


class UsageError(Exception):
    """Bad flags or unusable inputs; maps to exit status 2."""


def _resolve_config(args: argparse.Namespace) -> dict[str, object]:
    resolved = dict(DEFAULTS)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            kv = codecs.read_keyvalues(cfg_path)
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {cfg_path}") from exc
        for key, default in DEFAULTS.items():
            if key in kv:
                resolved[key] = type(default)(kv[key])
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _manifest(command: str, resolved: dict[str, object], extras: dict[str, object]) -> dict:
    manifest: dict[str, object] = {"command": command, "version": __version__}
    for key in sorted(resolved):
        manifest[key] = resolved[key]
    manifest.update(extras)
    return manifest


def _flow_params(resolved: dict[str, object]) -> FlowParams:
    return FlowParams(
        pyramid_levels=int(resolved["levels"]),
        window_radius=int(resolved["window"]),
        iterations_per_level=int(resolved["iterations"]),
        min_eigen_threshold=float(resolved["min_eigen"]),
    )


def _parse_severities(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or any(s < 1 or s > 6 for s in out) or len(set(out)) != len(out):
        raise UsageError(f"severities must be distinct values in 1..6, got {text!r}")
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    try:
        image = codecs.read_image_png(args.image)
        label = codecs.read_label_png(args.label)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    severities = _parse_severities(args.severities or "1-6")
    seed = int(resolved["seed"])
    length = int(resolved["length"])
    child_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(6)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for severity in severities:
        seq = generate_sequence(
            image, label, severity=severity, length=length, seed=child_seeds[severity - 1]
        )
        save_sequence(seq, out / f"sev_{severity}")
    extras = {
        "image": args.image,
        "label": args.label,
        "out": str(out),
        "severities": ",".join(str(s) for s in severities),
    }
    codecs.write_keyvalues(
        args.manifest or out / "manifest.txt", _manifest("synth", resolved, extras)
    )
    return 0


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

def cmd_flow(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    try:
        prev = codecs.read_image_png(args.prev)
        next_ = codecs.read_image_png(args.next)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if (prev.height, prev.width) != (next_.height, next_.width):
        raise UsageError("frame dimensions differ")
    params = _flow_params(resolved)
    fwd = compute_flow(prev, next_, params)
    bwd = compute_flow(next_, prev, params)
    eps = float(resolved["fb_epsilon"])
    corr_fwd = forward_backward_check(fwd, bwd, eps)
    corr_bwd = forward_backward_check(bwd, fwd, eps)
    codecs.write_flo(args.out_fwd, fwd)
    codecs.write_flo(args.out_bwd, bwd)
    corr_dir = Path(args.out_corr)
    corr_dir.mkdir(parents=True, exist_ok=True)
    codecs.write_mask_png(corr_dir / "tracked_fwd.png", corr_fwd.tracked)
    codecs.write_mask_png(corr_dir / "dual_fwd.png", corr_fwd.dual_matched)
    codecs.write_mask_png(corr_dir / "tracked_bwd.png", corr_bwd.tracked)
    codecs.write_mask_png(corr_dir / "dual_bwd.png", corr_bwd.dual_matched)
    extras = {
        "prev": args.prev,
        "next": args.next,
        "out_fwd": args.out_fwd,
        "out_bwd": args.out_bwd,
        "out_corr": str(corr_dir),
    }
    codecs.write_keyvalues(
        args.manifest or corr_dir / "manifest.txt", _manifest("flow", resolved, extras)
    )
    return 0


# ---------------------------------------------------------------------------
# stb
# ---------------------------------------------------------------------------

def _load_predictions(pred_dir: Path) -> list[SoftmaxMap | LabelMap]:
    sfm = sorted(pred_dir.glob("*.sfm"))
    if sfm:
        return [codecs.read_sfm(p) for p in sfm]
    png = sorted(pred_dir.glob("*.png"))
    if png:
        return [codecs.read_label_png(p) for p in png]
    raise UsageError(f"no .sfm or .png predictions in {pred_dir}")


def cmd_stb(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    seq_dir = Path(args.seq_dir)
    if not seq_dir.is_dir():
        raise UsageError(f"sequence directory not found: {seq_dir}")
    seq = load_sequence(seq_dir)
    preds = _load_predictions(Path(args.pred_dir))
    if len(preds) != seq.length:
        raise UsageError(
            f"{len(preds)} predictions for a {seq.length}-frame sequence"
        )
    params = _flow_params(resolved)
    eps = float(resolved["fb_epsilon"])
    corrs = []
    for t in range(1, seq.length):
        into_t = compute_flow(seq.frames[t].image, seq.frames[t - 1].image, params)
        into_prev = compute_flow(seq.frames[t - 1].image, seq.frames[t].image, params)
        corrs.append(forward_backward_check(into_t, into_prev, eps))
    gt_flows = [fr.gt_flow_from_prev for fr in seq.frames[1:]]
    occlusions = [fr.occluded_from_prev for fr in seq.frames[1:]]
    gt_labels = [fr.label for fr in seq.frames]
    region = RegionSpec(mode=args.region, band_width=int(resolved["band"]))
    report = stb(preds, gt_flows, occlusions, corrs, region, gt_labels)
    print(f"STB {report.stb:.2f}")

    out: dict[str, object] = {f"stb_{args.region}": f"{report.stb:.2f}"}
    pred_labels = [p if isinstance(p, LabelMap) else argmax_labels(p) for p in preds]
    classes = max(
        max(int(l.labels.max()) for l in pred_labels),
        max(int(l.labels.max()) for l in gt_labels),
    ) + 1
    out["miou"] = f"{miou(pred_labels, gt_labels, max(classes, 2)):.2f}"
    if all(isinstance(p, SoftmaxMap) and p.classes == 2 for p in preds):
        if max(int(l.labels.max()) for l in gt_labels) <= 1:
            out["mae"] = f"{mae(preds, gt_labels):.2f}"
    pair_indices = [t for t in range(1, seq.length) if t not in report.skipped]
    for t, ratio, count in zip(pair_indices, report.per_pair, report.evaluated_pixels):
        out[f"pair_{t:03d}"] = f"{ratio:.6f}"
        out[f"evaluated_{t:03d}"] = count
    for t in report.skipped:
        out[f"pair_{t:03d}"] = "skipped"
    report_path = Path(args.report_out)
    codecs.write_keyvalues(report_path, out)
    extras = {
        "seq_dir": str(seq_dir),
        "pred_dir": args.pred_dir,
        "region": args.region,
        "report_out": str(report_path),
    }
    codecs.write_keyvalues(
        args.manifest or report_path.with_suffix(".manifest.txt"),
        _manifest("stb", resolved, extras),
    )
    return 0


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cmd_loss(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    m_prev = codecs.read_sfm(args.m_prev)
    m_next = codecs.read_sfm(args.m_next)
    if args.flow_fwd:
        flow_fwd = codecs.read_flo(args.flow_fwd)
    else:
        flow_fwd = FlowField.zeros(m_next.height, m_next.width)
    if args.flow_bwd:
        flow_bwd = codecs.read_flo(args.flow_bwd)
    else:
        flow_bwd = FlowField.zeros(m_prev.height, m_prev.width)
    config = LossConfig(
        theta=int(resolved["theta"]),
        gamma=float(resolved["gamma"]),
        alpha=float(resolved["alpha"]),
        beta=float(resolved["beta"]),
        fb_epsilon=float(resolved["fb_epsilon"]),
    )
    corr_fwd = forward_backward_check(flow_fwd, flow_bwd, config.fb_epsilon)
    corr_bwd = forward_backward_check(flow_bwd, flow_fwd, config.fb_epsilon)
    pair = FramePair(m_prev, m_next, flow_fwd, flow_bwd, corr_fwd, corr_bwd)
    labeled = None
    if (args.gt is None) != (args.pred is None):
        raise UsageError("--gt and --pred must be given together")
    if args.gt is not None:
        labeled = (codecs.read_sfm(args.pred), codecs.read_label_png(args.gt))
    report = total_loss(labeled=labeled, pair=pair, config=config)
    for name, value in (
        ("l_seg", report.l_seg),
        ("l_bc", report.l_bc),
        ("l_gc", report.l_gc),
        ("l_all", report.l_all),
    ):
        print(f"{name} {value:.6f}")
    grad_dir = Path(args.grad_out)
    grad_dir.mkdir(parents=True, exist_ok=True)
    codecs.write_sfm_raw(grad_dir / "grad_m_prev.sfm", report.grad_t_minus_1)
    codecs.write_sfm_raw(grad_dir / "grad_m_next.sfm", report.grad_t)
    if report.grad_seg is not None:
        codecs.write_sfm_raw(grad_dir / "grad_pred.sfm", report.grad_seg)
    extras: dict[str, object] = {
        "m_prev": args.m_prev,
        "m_next": args.m_next,
        "grad_out": str(grad_dir),
        "l_seg": f"{report.l_seg:.6f}",
        "l_bc": f"{report.l_bc:.6f}",
        "l_gc": f"{report.l_gc:.6f}",
        "l_all": f"{report.l_all:.6f}",
    }
    for key, count in report.active_counts.items():
        extras[f"active_{key}"] = count
    codecs.write_keyvalues(
        args.manifest or grad_dir / "manifest.txt", _manifest("loss", resolved, extras)
    )
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_COLUMNS = [
    ("mIoU(test)", "miou_test"),
    ("mIoU(syn)", "miou_syn"),
    ("STB_global", "stb_global"),
    ("STB_local", "stb_local"),
]


def render_table(rows: list[dict[str, str]]) -> str:
    """Aligned markdown table; numbers are rendered with 2 decimals."""
    columns = list(_COLUMNS)
    if any("mae" in row for row in rows):
        columns.append(("MAE", "mae"))
    headers = ["Method"] + [name for name, _ in columns]
    cells = []
    for row in rows:
        line = [row["method"]]
        for _, key in columns:
            line.append(f"{float(row[key]):.2f}" if key in row else "-")
        cells.append(line)
    widths = [
        max(len(headers[i]), *(len(line[i]) for line in cells)) if cells else len(headers[i])
        for i in range(len(headers))
    ]
    def fmt(line: list[str], first_left: bool) -> str:
        parts = []
        for i, cell in enumerate(line):
            parts.append(cell.ljust(widths[i]) if i == 0 or first_left else cell.rjust(widths[i]))
        return "| " + " | ".join(parts) + " |"
    lines = [fmt(headers, True)]
    lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    lines.extend(fmt(line, False) for line in cells)
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    rows = []
    seen: set[str] = set()
    for path in args.reports:
        kv = codecs.read_keyvalues(path)
        if "method" not in kv:
            raise UsageError(f"{path}: report lacks a method name")
        if kv["method"] in seen:
            raise UsageError(f"duplicate method name {kv['method']!r}")
        seen.add(kv["method"])
        rows.append(kv)
    table = render_table(rows)
    print(table)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table + "\n", encoding="utf-8")
    extras = {"reports": ",".join(args.reports)}
    manifest_path = args.manifest or (
        f"{args.out}.manifest.txt" if args.out else "report.manifest.txt"
    )
    codecs.write_keyvalues(manifest_path, _manifest("report", resolved, extras))
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file overriding built-in defaults")
    p.add_argument("--manifest", help="manifest path (defaults near the main output)")
    p.add_argument("--seed", type=int)


def _add_flow_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=int, help="flow pyramid levels")
    p.add_argument("--window", type=int, help="flow window radius in pixels")
    p.add_argument("--iterations", type=int, help="flow iterations per level")
    p.add_argument("--min-eigen", type=float, help="structure tensor eigenvalue floor")
    p.add_argument("--fb-epsilon", type=float, help="forward-backward radius in pixels")


def _add_loss_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--theta", type=int, help="boundary band width in pixels")
    p.add_argument("--gamma", type=float, help="confidence gap threshold")
    p.add_argument("--alpha", type=float, help="boundary term weight")
    p.add_argument("--beta", type=float, help="global term weight")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cohseg",
        description="Temporal coherency toolkit for video segmentation",
    )
    parser.add_argument("--version", action="version", version=f"cohseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic perturbation sequences")
    p.add_argument("--image", required=True, help="source image PNG")
    p.add_argument("--label", required=True, help="source label PNG")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--length", type=int, help="frames per sequence")
    p.add_argument("--severities", help="severity list, e.g. 1-6 or 2,4")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", help="dense flow and dual matching for a frame pair")
    p.add_argument("--prev", required=True)
    p.add_argument("--next", required=True)
    p.add_argument("--out-fwd", required=True, help="flow of prev toward next (.flo)")
    p.add_argument("--out-bwd", required=True, help="flow of next toward prev (.flo)")
    p.add_argument("--out-corr", required=True, help="directory for match masks")
    _add_flow_params(p)
    _add_common(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("stb", help="stability rate of a prediction sequence")
    p.add_argument("--seq-dir", required=True, help="generated sequence directory")
    p.add_argument("--pred-dir", required=True, help="per-frame .sfm or label .png files")
    p.add_argument("--region", choices=("global", "local"), default="global")
    p.add_argument("--band", type=int, help="band width for the local region")
    p.add_argument("--report-out", default="stb_report.txt")
    _add_flow_params(p)
    _add_common(p)
    p.set_defaults(func=cmd_stb)

    p = sub.add_parser("loss", help="coherency losses and gradients for a frame pair")
    p.add_argument("--m-prev", required=True, help="earlier softmax map (.sfm)")
    p.add_argument("--m-next", required=True, help="later softmax map (.sfm)")
    p.add_argument("--flow-fwd", help="field on m_next's grid into m_prev (.flo); zero if absent")
    p.add_argument("--flow-bwd", help="field on m_prev's grid into m_next (.flo); zero if absent")
    p.add_argument("--gt", help="label PNG for the cross-entropy term")
    p.add_argument("--pred", help="softmax map (.sfm) for the cross-entropy term")
    p.add_argument("--grad-out", required=True, help="directory for gradient maps")
    _add_loss_params(p)
    _add_flow_params(p)
    _add_common(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("report", help="render metric reports as an aligned table")
    p.add_argument("reports", nargs="+", help="key=value metric report files")
    p.add_argument("--out", help="write the table here as well")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cohseg: error: {exc}", file=sys.stderr)
        return 2
    except (codecs.CodecError, OSError, ValueError) as exc:
        print(f"cohseg: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # invariant violation
        print(f"cohseg: internal error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

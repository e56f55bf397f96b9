"""Command-line entry point.

Exit codes: 0 success, 1 operational error, 2 undefined metric under --strict.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import volio
from .loss import LossConfig, weighted_dice_loss
from .metrics import EvalConfig, check_weights, evaluate_case
from .nn import VARIANTS, ModelConfig, init_model, model_forward, output_hash, save_params
from .phantom import PhantomSpec, generate_phantom
from .preprocess import ClaheParams, preprocess_volume
from .volume import Spacing, Volume

EXIT_OK, EXIT_ERROR, EXIT_UNDEFINED = 0, 1, 2
PREPROCESS_ORDER = "clahe>normalize"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are operational errors (1); 2 is reserved for --strict
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _add_metric_flags(p):
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--theta-mm", type=_positive, default=1.0)
    p.add_argument("--w1", type=float, default=0.1)
    p.add_argument("--w2", type=float, default=0.9)
    p.add_argument("--attention", choices=VARIANTS, default="sk",
                   help="attention variant recorded in the report")
    p.add_argument("--oracle", action="store_true", help="force the brute-force surface-distance path")
    p.add_argument("--hd-literal-sum", action="store_true",
                   help="report the sum of the two directed Hausdorff maxima")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="toothbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic intensity/label volume pair")
    p.add_argument("out", help="output prefix; writes <out>_image and <out>_label")
    p.add_argument("--dims", type=int, nargs=3, default=(32, 64, 64), metavar=("D", "H", "W"))
    p.add_argument("--spacing", type=_positive, nargs=3, default=(0.3, 0.25, 0.25), metavar=("DZ", "DY", "DX"))
    p.add_argument("--teeth", type=int, default=8)
    p.add_argument("--missing-teeth", action="store_true")
    p.add_argument("--appliance", action="store_true")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("preprocess", help="CLAHE per axial slice, then [0,1] normalization")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--clip-limit", type=_positive, default=2.0)
    p.add_argument("--tiles", type=int, nargs=2, default=(8, 8))
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--resize", action="store_true", help="resample axial slices to 256x256")

    p = sub.add_parser("forward", help="run the seeded network on a volume")
    p.add_argument("input")
    p.add_argument("output", help="output prefix; writes <out>_main and <out>_aux<k>")
    p.add_argument("--attention", choices=VARIANTS, default="sk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--no-ds-heads", action="store_true")
    p.add_argument("--save-params", action="store_true", help="also write <out>_params")

    p = sub.add_parser("loss", help="weighted dice loss of a probability map against a label")
    p.add_argument("pred")
    p.add_argument("ref")
    p.add_argument("--w1", type=float, default=0.1)
    p.add_argument("--w2", type=float, default=0.9)
    p.add_argument("--epsilon", type=float, default=1e-6)

    p = sub.add_parser("evaluate", help="nine-metric report for one prediction")
    p.add_argument("pred")
    p.add_argument("ref")
    p.add_argument("--case-id", default=None)
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--strict", action="store_true", help="exit 2 if any metric is undefined")
    _add_metric_flags(p)

    p = sub.add_parser("report", help="aggregate case reports into one table with a mean row")
    p.add_argument("inputs", nargs="+", help="case report JSON files")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    return parser


def _check_weights(args):
    try:
        check_weights(args.w1, args.w2)
    except ValueError as e:
        raise CliError(str(e)) from None


def _load_any(path: str) -> Volume:
    if path.endswith(".nii"):
        return volio.read_nifti(path)
    return volio.read_volume(path)


def _as_probability(v: Volume) -> Volume:
    if v.kind == "probability":
        return v
    data = np.asarray(v.data, dtype=np.float64)
    return Volume(data, v.spacing, "probability")


def _as_label(v: Volume) -> Volume:
    if v.kind == "label":
        return v
    return Volume((np.asarray(v.data) >= 0.5).astype(np.uint8), v.spacing, "label")


def _check_pair(pred: Volume, ref: Volume):
    if pred.dims != ref.dims:
        raise CliError(f"dimension mismatch: prediction {pred.dims} vs reference {ref.dims}")
    if pred.spacing != ref.spacing:
        raise CliError(f"spacing mismatch: prediction {pred.spacing.as_tuple()} vs reference {ref.spacing.as_tuple()}")


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=tuple(args.dims), spacing=Spacing(*args.spacing), tooth_count=args.teeth,
        missing_teeth=args.missing_teeth, appliance=args.appliance, noise_sigma=args.noise, seed=args.seed,
    )
    image, label = generate_phantom(spec)
    volio.write_volume(image, f"{args.out}_image")
    volio.write_volume(label, f"{args.out}_label")
    print(json.dumps({"image": f"{args.out}_image", "label": f"{args.out}_label", "category": spec.category}))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    v = _load_any(args.input)
    params = ClaheParams(args.clip_limit, tuple(args.tiles), args.bins)
    out = preprocess_volume(v, params, (256, 256) if args.resize else None)
    volio.write_volume(out, args.output, dtype="f32")
    print(json.dumps({"output": args.output, "order": PREPROCESS_ORDER, "dims": list(out.dims),
                      "clahe": {"clip_limit": params.clip_limit, "tiles": list(params.tiles), "bins": params.bins}}))
    return EXIT_OK


def cmd_forward(args) -> int:
    v = _load_any(args.input)
    cfg = ModelConfig(base_channels=args.base_channels, attention=args.attention,
                      ds_heads=not args.no_ds_heads, seed=args.seed)
    params = init_model(cfg)
    x = np.asarray(v.data, dtype=np.float64)[None, None]
    try:
        main, aux = model_forward(x, cfg, params)
    except ValueError as e:
        raise CliError(str(e)) from None
    outputs = {"main": f"{args.output}_main"}
    volio.write_volume(Volume(main[0, 0], v.spacing, "probability"), outputs["main"], dtype="f32")
    for k, a in enumerate(aux):
        outputs[f"aux{k}"] = f"{args.output}_aux{k}"
        volio.write_volume(Volume(a[0, 0], v.spacing, "probability"), outputs[f"aux{k}"], dtype="f32")
    if args.save_params:
        save_params(params, f"{args.output}_params")
        outputs["params"] = f"{args.output}_params"
    print(json.dumps({"outputs": outputs, "attention": cfg.attention, "seed": cfg.seed,
                      "hash": output_hash(main, aux)}))
    return EXIT_OK


def cmd_loss(args) -> int:
    _check_weights(args)
    pred, ref = _as_probability(_load_any(args.pred)), _as_label(_load_any(args.ref))
    _check_pair(pred, ref)
    value = weighted_dice_loss(pred, ref, LossConfig(args.w1, args.w2, args.epsilon))
    print(json.dumps(asdict(value)))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _check_weights(args)
    if not 0 < args.threshold < 1:
        raise CliError(f"--threshold must lie in (0, 1), got {args.threshold}")
    pred, ref = _as_probability(_load_any(args.pred)), _as_label(_load_any(args.ref))
    _check_pair(pred, ref)
    cfg = EvalConfig(threshold=args.threshold, theta_mm=args.theta_mm, w1=args.w1, w2=args.w2,
                     hd_mode="literal-sum" if args.hd_literal_sum else "symmetric",
                     method="oracle" if args.oracle else "auto")
    case_id = args.case_id or Path(volio._stem(args.pred)).name
    report = evaluate_case(pred, ref, cfg, case_id=case_id, attention=args.attention,
                           preprocess=PREPROCESS_ORDER)
    if args.format == "json":
        text = volio.format_case_json(report)
    else:
        text = volio.format_report_csv([report])
    _emit(text, args.out)
    undefined = report.undefined()
    if undefined:
        print(f"undefined metrics: {', '.join(undefined)}", file=sys.stderr)
        if args.strict:
            return EXIT_UNDEFINED
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        reports.extend(volio.read_reports(path))
    if not reports:
        raise CliError("no case reports found")
    text = volio.format_report_json(reports) if args.format == "json" else volio.format_report_csv(reports)
    _emit(text, args.out)
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "forward": cmd_forward,
    "loss": cmd_loss,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, KeyError) as e:
        print(f"toothbench {args.command}: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

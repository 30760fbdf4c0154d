"""``lkcell`` command line: infer, eval, reparam-check, flops, render.

Exit codes: 0 success, 1 validation error (bad flags, bad data, failed
check), 2 I/O error.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import flops as flops_mod
from . import io as lio
from .errors import LKCellError, ValidationError
from .metrics import aggregate, evaluate
from .model_store import load
from .network import DOWNSAMPLE_FACTOR, PUBLISHED_REFERENCE, SegmentationOutput, build_network, get_config
from .postprocess import InstanceSegmentation, PostprocessParams, from_masks, instance_segment
from .render import overlay


EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
SCHEMA_VERSION = 1
INST_SUFFIX = "_inst.png"
CLASS_SUFFIX = "_class.png"


class UsageError(LKCellError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"size must be positive, got {text!r}")
    return h, w


def _postprocess_params(args):
    return PostprocessParams(args.np_threshold, args.marker_threshold, args.min_size)


def _pad_to_multiple(img, multiple=DOWNSAMPLE_FACTOR):
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return img, False
    return np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"), True


def _maps_from_npz(path):
    with np.load(path) as z:
        maps = [np.asarray(z[k], dtype=np.float64) for k in ("np", "hv", "nt")]
    maps = [m[None] if m.ndim == 3 else m for m in maps]
    return SegmentationOutput(*maps)


def _write_seg(out_dir, stem, seg: InstanceSegmentation):
    lio.write_instance_mask(out_dir / (stem + INST_SUFFIX), seg.label_map)
    lio.write_class_mask(out_dir / (stem + CLASS_SUFFIX), seg.class_map())


def cmd_infer(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = _postprocess_params(args)
    net = None
    if not args.from_maps:
        if not args.weights:
            raise UsageError("--weights is required unless --from-maps is given")
        net = load(args.weights, args.config)
    failed = 0
    for path in map(Path, args.input):
        try:
            note = ""
            if args.from_maps:
                output = _maps_from_npz(path)
            else:
                rgb = lio.read_rgb(path)
                image = rgb.transpose(2, 0, 1)[None].astype(np.float32) / 255.0
                h, w = image.shape[2:]
                padded, was_padded = _pad_to_multiple(image)
                output = net(padded)
                if was_padded:
                    output = SegmentationOutput(output.np_map[..., :h, :w], output.hv_map[..., :h, :w],
                                                output.nt_map[..., :h, :w])
                    note = f" (reflect-padded {h}x{w} -> {padded.shape[2]}x{padded.shape[3]}, cropped back)"
            seg = instance_segment(output, params)
            _write_seg(out_dir, path.stem, seg)
            print(f"{path.name}: {seg.num_instances} instances{note}")
        except (OSError, ValueError) as exc:
            failed += 1
            print(f"{path}: error: {exc}", file=sys.stderr)
    if failed:
        return EXIT_IO
    return EXIT_OK


def _fmt(v):
    return "   n/a" if v is None else f"{v:.4f}"


def evaluation_report(records, pred_dir, num_classes):
    pred_dir = Path(pred_dir)
    images = []
    pairs = []
    missing = []
    for rec in records:
        gt = from_masks(*lio.read_masks(rec.instance_mask, rec.class_mask))
        inst_path = pred_dir / (rec.key + INST_SUFFIX)
        class_path = pred_dir / (rec.key + CLASS_SUFFIX)
        if inst_path.exists() and class_path.exists():
            pred = from_masks(*lio.read_masks(inst_path, class_path))
            is_missing = False
        else:
            pred = InstanceSegmentation(np.zeros_like(gt.label_map))
            is_missing = True
            missing.append(rec.key)
        if pred.label_map.shape != gt.label_map.shape:
            raise ValidationError(f"{rec.key}: prediction {pred.label_map.shape} and ground truth "
                                  f"{gt.label_map.shape} differ in size")
        report = evaluate(gt, pred, num_classes)
        pairs.append((rec.tissue, report))
        images.append({"key": rec.key, "tissue": rec.tissue, "fold": rec.fold,
                       "missing_prediction": is_missing, "metrics": report.to_dict()})
    agg = aggregate(pairs)
    return {
        "schema_version": SCHEMA_VERSION,
        "num_classes": num_classes,
        "images": images,
        "per_tissue": agg.per_tissue,
        "images_per_tissue": agg.images_per_tissue,
        "per_class_pq": {str(c): v for c, v in agg.per_class.items()},
        "overall": agg.overall,
        "missing_predictions": missing,
    }


def print_report(doc, file=None):
    file = sys.stdout if file is None else file
    print(f"{'tissue':<20} {'n':>4} {'mPQ':>7} {'bPQ':>7} {'DQ':>7} {'SQ':>7} {'Dice':>7} {'F1':>7}", file=file)
    for tissue, row in sorted(doc["per_tissue"].items()):
        n = doc["images_per_tissue"][tissue]
        print(f"{tissue:<20} {n:>4} {_fmt(row['mpq']):>7} {_fmt(row['bpq']):>7} {_fmt(row['dq']):>7} "
              f"{_fmt(row['sq']):>7} {_fmt(row['dice']):>7} {_fmt(row['f1']):>7}", file=file)
    o = doc["overall"]
    print(f"{'Average':<20} {len(doc['images']):>4} {_fmt(o['mpq']):>7} {_fmt(o['bpq']):>7} {_fmt(o['dq']):>7} "
          f"{_fmt(o['sq']):>7} {_fmt(o['dice']):>7} {_fmt(o['f1']):>7}", file=file)
    if doc["per_class_pq"]:
        print("per-class PQ: " + ", ".join(f"{c}={_fmt(v).strip()}" for c, v in doc["per_class_pq"].items()),
              file=file)
    for key in doc["missing_predictions"]:
        print(f"warning: no prediction for {key}, scored as empty", file=file)


def cmd_eval(args):
    records = lio.load_manifest(args.gt)
    doc = evaluation_report(records, args.pred, args.num_classes)
    print_report(doc)
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def reparam_check(config, seed=0, trials=5, size=(64, 64), tolerance=1e-3, corrupt=False):
    """Max abs deviation between multi-branch and fused forwards over random images."""
    if trials < 1:
        raise UsageError(f"--trials must be >= 1, got {trials}")
    net = build_network(config, seed)
    fused = net.reparameterize()
    if corrupt:
        fused = _corrupt_fused_kernel(fused)
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        image = gen.random((1, 3) + tuple(size)).astype(np.float32)
        a, b = net(image), fused(image)
        for x, y in ((a.np_map, b.np_map), (a.hv_map, b.hv_map), (a.nt_map, b.nt_map)):
            worst = max(worst, float(np.abs(x - y).max()))
    return worst <= tolerance, worst


def _corrupt_fused_kernel(net):
    """Negative control: scale the last decoder block's fused kernel by -10."""
    last = net.decoder[-1]
    core = last.block.core_conv
    bad = replace(last.block, core_conv=core.replace(weight=core.weight * -10.0))
    return replace(net, decoder=net.decoder[:-1] + (replace(last, block=bad),))


def cmd_reparam_check(args):
    ok, worst = reparam_check(get_config(args.config), args.seed, args.trials, parse_size(args.size),
                              args.tolerance, args.corrupt_fused)
    print(f"{'PASS' if ok else 'FAIL'} config={args.config} trials={args.trials} size={args.size} "
          f"max_abs_deviation={worst:.3e} tolerance={args.tolerance:.0e}")
    return EXIT_OK if ok else EXIT_VALIDATION


def flops_table(config, height, width):
    multi = flops_mod.layer_costs(config, height, width, fused=False)
    fused = {r.name: r for r in flops_mod.layer_costs(config, height, width, fused=True)}
    rows = []
    for r in multi:
        rows.append({"layer": r.name, "params": r.params, "flops": r.flops})
    totals = {
        "params_multibranch": sum(r.params for r in multi),
        "params_fused": sum(r.params for r in fused.values()),
        "flops_multibranch": sum(r.flops for r in multi),
        "flops_fused": sum(r.flops for r in fused.values()),
        "macs_multibranch": sum(r.macs for r in multi),
        "macs_fused": sum(r.macs for r in fused.values()),
    }
    return rows, list(fused.values()), totals


def cmd_flops(args):
    config = get_config(args.config)
    h, w = parse_size(args.size)
    multi, fused, totals = flops_table(config, h, w)
    if args.per_layer:
        print(f"{'layer (multi-branch)':<48} {'params':>12} {'FLOPs':>16}")
        for r in multi:
            print(f"{r['layer']:<48} {r['params']:>12,} {r['flops']:>16,}")
        print()
    print(f"{config.variant} at {h}x{w}")
    print(f"{'':<14} {'multi-branch':>16} {'fused':>16}")
    print(f"{'params':<14} {totals['params_multibranch']:>16,} {totals['params_fused']:>16,}")
    print(f"{'FLOPs':<14} {totals['flops_multibranch']:>16,} {totals['flops_fused']:>16,}")
    print(f"{'MACs':<14} {totals['macs_multibranch']:>16,} {totals['macs_fused']:>16,}")
    ref = PUBLISHED_REFERENCE.get(config.variant)
    doc = {"config": config.variant, "size": [h, w], "totals": totals, "layers": multi}
    if ref:
        p_m, f_g = totals["params_fused"] / 1e6, totals["flops_fused"] / 1e9
        print(f"published reference: {ref[0]:.2f} M params, {ref[1]:.2f} G FLOPs "
              f"(delta vs fused: {p_m - ref[0]:+.2f} M, {f_g - ref[1]:+.2f} G; reference only)")
        doc["reference"] = {"params_m": ref[0], "flops_g": ref[1],
                            "delta_params_m": p_m - ref[0], "delta_flops_g": f_g - ref[1]}
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_render(args):
    rgb = lio.read_rgb(args.image)
    labels = lio.read_instance_mask(args.inst)
    classes = lio.read_class_mask(args.class_mask) if args.class_mask else None
    lio.write_rgb(args.out, overlay(rgb, labels, classes))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="lkcell", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    inf = sub.add_parser("infer", help="segment images into instance/class mask PNGs")
    inf.add_argument("--weights", help=".lkcw weight file")
    inf.add_argument("--config", default="lkcell-b")
    inf.add_argument("--input", nargs="+", required=True, help="RGB PNGs, or .npz maps with --from-maps")
    inf.add_argument("--out", required=True)
    inf.add_argument("--from-maps", action="store_true",
                     help="inputs are .npz files holding np (2,H,W), hv (2,H,W), nt (C,H,W) maps")
    inf.add_argument("--np-threshold", type=float, default=0.5)
    inf.add_argument("--marker-threshold", type=float, default=0.4)
    inf.add_argument("--min-size", type=int, default=10)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="score predicted masks against a manifest")
    ev.add_argument("--gt", required=True, help="JSON manifest")
    ev.add_argument("--pred", required=True, help="directory of <image stem>_inst.png / _class.png")
    ev.add_argument("--num-classes", type=int, default=6, help="class count including background")
    ev.add_argument("--json", help="write the machine-readable report here")
    ev.set_defaults(func=cmd_eval)

    rc = sub.add_parser("reparam-check", help="compare fused and multi-branch forwards")
    rc.add_argument("--config", default="lkcell-b")
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--trials", type=int, default=5)
    rc.add_argument("--size", default="64x64")
    rc.add_argument("--tolerance", type=float, default=1e-3)
    rc.add_argument("--corrupt-fused", action="store_true", help=argparse.SUPPRESS)
    rc.set_defaults(func=cmd_reparam_check)

    fl = sub.add_parser("flops", help="parameter and FLOP totals")
    fl.add_argument("--config", default="lkcell-b")
    fl.add_argument("--size", default="256x256")
    fl.add_argument("--per-layer", action="store_true")
    fl.add_argument("--json")
    fl.set_defaults(func=cmd_flops)

    rd = sub.add_parser("render", help="draw instance boundaries over an image")
    rd.add_argument("--image", required=True)
    rd.add_argument("--inst", required=True, help="16-bit instance mask PNG")
    rd.add_argument("--class-mask", help="8-bit class mask PNG")
    rd.add_argument("--out", required=True)
    rd.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LKCellError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

    mnx train    --config c.json --data dir --epochs N --out w.mnxw
    mnx infer    --weights w.mnxw --image p.ppm [--conf 0.25] [--iou 0.65]
                 [--out dets.jsonl] [--draw out.ppm]
    mnx eval     --weights w.mnxw --data dir
    mnx params   --config c.json
    mnx bench    --config c.json [--weights w.mnxw]
    mnx selftest

Exit codes: 0 success, 1 failure, 2 bad usage. Weight files embed their
config, so infer/eval/bench need no --config. Detections stream out as JSON
lines: {"image_id", "class_id", "score", "box": [x1, y1, x2, y2]}.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _load_config(path):
    from .config import ModelConfig
    if path is None:
        return ModelConfig()
    return ModelConfig.from_file(path)


def _load_model(weights_path):
    from .config import ModelConfig
    from .model import build_model
    from .weights import embedded_config_json, load_into_model, load_weights
    store = load_weights(weights_path)
    cfg_json = embedded_config_json(store)
    if cfg_json is None:
        raise ValueError(f"{weights_path} has no embedded config; "
                         "was it saved by `mnx train`?")
    cfg = ModelConfig.from_json(cfg_json)
    model = build_model(cfg)
    load_into_model(model, store)
    model.eval()
    return model, cfg


def cmd_train(args):
    from .data import load_dataset
    from .train import train
    cfg = _load_config(args.config)
    dataset = load_dataset(args.data)
    if dataset.n_classes > cfg.num_classes:
        raise ValueError(f"dataset has {dataset.n_classes} classes but config "
                         f"allows {cfg.num_classes}")
    log_path = args.log or (os.path.splitext(args.out)[0] + "_loss.csv")
    train(cfg, dataset, epochs=args.epochs, lr=args.lr, momentum=args.momentum,
          batch_size=args.batch, max_steps=args.max_steps, out_path=args.out,
          log_path=log_path, quiet=False)
    print(f"saved weights to {args.out}; loss log at {log_path}")
    return 0


def _iter_images(path):
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path)
                       if n.lower().endswith((".ppm", ".png")))
        for n in names:
            yield os.path.join(path, n)
    else:
        yield path


def cmd_infer(args):
    from .head import Detection
    from .imageio import draw_detections, letterbox, load_image, save_ppm, unletterbox_box
    from .train import predict
    model, cfg = _load_model(args.weights)
    out_f = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for img_id, path in enumerate(_iter_images(args.image)):
            img = load_image(path)
            _, oh, ow = img.shape
            boxed, scale, pad = letterbox(img, cfg.input_size)
            dets = predict(model, boxed, conf=args.conf, iou=args.iou)
            mapped = []
            for d in dets:
                box = unletterbox_box(d.box, scale, pad, ow, oh)
                if box[2] > box[0] and box[3] > box[1]:
                    mapped.append(Detection(d.class_id, d.score, box))
            for d in mapped:
                out_f.write(json.dumps(d.to_json_dict(img_id)) + "\n")
            if args.draw:
                canvas = (img.data.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
                save_ppm(args.draw, draw_detections(canvas, mapped))
    finally:
        if args.out:
            out_f.close()
    return 0


def cmd_eval(args):
    from .data import load_dataset
    from .imageio import letterbox
    from .train import evaluate_dataset
    model, cfg = _load_model(args.weights)
    dataset = load_dataset(args.data)
    if dataset.size != cfg.input_size:
        # Letterbox everything once up front; synthetic data is usually
        # generated at the network size already.
        dataset.images = [letterbox(im, cfg.input_size)[0].data for im in dataset.images]
        scale = cfg.input_size / dataset.size
        from .head import GroundTruthBox
        dataset.gts = [[GroundTruthBox(g.class_id,
                                       tuple(v * scale for v in g.box), g.image_id)
                        for g in gt] for gt in dataset.gts]
    ap50, ap = evaluate_dataset(model, dataset, conf=args.conf, iou=args.iou)
    print(f"AP50 {ap50:.4f}")
    print(f"AP50:95 {ap:.4f}")
    return 0


def cmd_params(args):
    from .analysis import (REFERENCE_FLOPS, REFERENCE_PARAMS,
                           count_params_flops, format_count)
    cfg = _load_config(args.config)
    params, flops = count_params_flops(cfg)
    print(f"params {format_count(params)} ({params})")
    print(f"flops  {format_count(flops)} at {cfg.input_size}x{cfg.input_size} "
          f"(2*MACs convention)")
    print(f"published full-size reference: {REFERENCE_PARAMS} / {REFERENCE_FLOPS}; "
          "see README for why counts differ")
    return 0


def cmd_bench(args):
    from .analysis import BENCH_CSV_HEADER, bench
    if args.weights:
        model, cfg = _load_model(args.weights)
    else:
        cfg = _load_config(args.config)
        model = None
    stats = bench(cfg, model=model, n_warmup=args.warmup, n_iter=args.iters,
                  config_name=args.name)
    print(BENCH_CSV_HEADER)
    print(stats["csv"])
    print(f"# median {stats['median_ms']:.2f} ms over {stats['n_iter']} iters; "
          "absolute numbers are machine-specific")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest
    return 0 if run_selftest(verbose=True) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="mnx", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--config", help="model config JSON (defaults used if omitted)")
    t.add_argument("--data", required=True, help="dataset dir with annotations.json")
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--out", required=True, help="output .mnxw weight file")
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--log", help="loss CSV path")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="detect objects in an image or directory")
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True, help="image file or directory")
    i.add_argument("--conf", type=float, default=0.25)
    i.add_argument("--iou", type=float, default=0.65)
    i.add_argument("--out", help="JSONL output path (stdout if omitted)")
    i.add_argument("--draw", help="render detections into this PPM")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="AP50 / AP50:95 on a dataset directory")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--conf", type=float, default=0.05)
    e.add_argument("--iou", type=float, default=0.65)
    e.set_defaults(fn=cmd_eval)

    pa = sub.add_parser("params", help="parameter / FLOP accounting")
    pa.add_argument("--config")
    pa.set_defaults(fn=cmd_params)

    b = sub.add_parser("bench", help="batch-1 forward latency")
    b.add_argument("--config")
    b.add_argument("--weights")
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--name", default="default")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("selftest", help="run the built-in verification suites")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

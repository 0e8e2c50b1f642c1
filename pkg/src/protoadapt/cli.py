"""Command-line surface for the full workflow.

Subcommands: gen-data, train, estimate, adapt, eval, diagnose,
export-embeddings. Exit codes: 0 success, 2 usage/config error,
3 estimation failure, 4 source-freeness violation, 5 numerical divergence.

Config files are plain key=value lines (# comments); command-line flags
override file values. Every run echoes its fully-resolved config next to
its outputs so result directories are self-describing.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import adaptation as adapt_mod
from . import autodiff as ad
from . import datasets as ds
from .adaptation import ExperimentConfig
from .errors import DivergenceError, EstimationError, GenerationError, ProtoAdaptError
from .fileformats import read_keyvalue, save_embeddings, write_keyvalue
from .gmm import generate_pseudo_dataset, load_gmm, save_gmm
from .rng import Rng

EXIT_USAGE = 2
EXIT_ESTIMATION = 3
EXIT_SOURCE_FREEDOM = 4
EXIT_DIVERGENCE = 5


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config

_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)} | {"lambda"}
_INT_KEYS = {
    "num_projections",
    "source_steps",
    "adapt_steps",
    "batch_source",
    "batch_target",
    "pseudo_batch",
    "seed",
    "max_draw_factor",
    "embed_dim",
}
_FLOAT_KEYS = {"tau_fit", "tau_filter", "lambda", "lambda_", "lr", "adapt_lr"}
_BOOL_KEYS = {"neighborhood", "freeze_classifier"}


def _coerce(key: str, value: str):
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _BOOL_KEYS:
        return value.lower() in ("1", "true", "yes")
    if key == "encoder_hidden":
        return tuple(int(x) for x in value.split(",") if x)
    return value


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    values = {}
    if path:
        for key, raw in read_keyvalue(path).items():
            if key not in _CONFIG_KEYS:
                raise CliError(f"unknown config key: {key}")
            values["lambda_" if key == "lambda" else key] = _coerce(key, raw)
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    return ExperimentConfig(**values)


def echo_config(config: ExperimentConfig, out_dir: str, extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        ("lambda" if k == "lambda_" else k): v for k, v in config.__dict__.items()
    }
    payload["encoder_hidden"] = ",".join(str(x) for x in config.encoder_hidden)
    if extra:
        payload.update(extra)
    write_keyvalue(os.path.join(out_dir, "resolved_config.txt"), payload)


def _require_dir(path: str, what: str) -> str:
    if not os.path.isdir(path):
        raise CliError(f"{what} directory not found: {path}")
    return path


def _load_labeled(path: str):
    images, labels, manifest = ds.load_split(path)
    if labels is None:
        raise CliError(f"labels missing in {path}")
    return images, labels, manifest


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec_values = read_keyvalue(args.spec) if args.spec else {}
    known = {
        "kind",
        "K",
        "n_images",
        "n_eval",
        "height",
        "width",
        "channels",
        "mean_shift",
        "rotation",
        "channel_gain",
        "noise_sigma",
        "seed",
        "preset",
    }
    for key in spec_values:
        if key not in known:
            raise CliError(f"unknown spec key: {key}")
    n_eval = int(spec_values.pop("n_eval", 500))
    if spec_values.pop("preset", "") == "standard" or args.preset == "standard":
        spec = ds.standard_shift_spec(seed=int(spec_values.get("seed", 0)))
    else:
        shift = ds.Shift(
            mean_shift=float(spec_values.pop("mean_shift", 0.0)),
            rotation=float(spec_values.pop("rotation", 0.0)),
            channel_gain=tuple(
                float(x) for x in spec_values.pop("channel_gain", "1,1,1").split(",")
            ),
            noise_sigma=float(spec_values.pop("noise_sigma", 0.0)),
        )
        kwargs = {}
        for key, raw in spec_values.items():
            kwargs[key] = raw if key == "kind" else int(raw)
        spec = ds.DomainSpec(shift=shift, **kwargs)

    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise CliError(f"output directory {args.out} is not empty (use --force)")
    paths = ds.write_dataset(args.out, spec, n_eval=n_eval)
    for split, path in paths.items():
        manifest = read_keyvalue(os.path.join(path, "manifest.txt"))
        print(f"{split}: {path} n={manifest['n_images']} labeled={manifest['labeled']}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, {"seed": args.seed, "source_steps": args.steps})
    images, labels, _ = _load_labeled(_require_dir(args.data, "data"))
    model, losses = adapt_mod.train_source(config, images, labels)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    ad.save_model(args.out, model)
    log_path = args.out + ".trainlog.csv"
    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        writer.writerows((i, f"{v:.8g}") for i, v in enumerate(losses))
    echo_config(config, os.path.dirname(os.path.abspath(args.out)) or ".")
    final = losses[-1] if losses else float("nan")
    print(f"checkpoint: {args.out} (steps={len(losses)}, final_loss={final:.6g})")
    return 0


def cmd_estimate(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    if args.tau is not None:
        config = replace(config, tau_fit=args.tau)
    model = ad.load_model(args.ckpt)
    data_dir = _require_dir(args.data, "data")
    images, labels, _ = _load_labeled(data_dir)
    gmm, info = adapt_mod.estimate_stage(model, images, labels, config)
    save_gmm(args.out, gmm)
    write_keyvalue(
        args.out + ".meta",
        {
            "source_data": os.path.realpath(data_dir),
            "tau_fit": config.tau_fit,
            "w_sp_exact": info.w_sp_exact,
            "w_sp_sliced": info.w_sp_sliced,
            "e_source": info.e_source,
            "n_pixels": info.n_pixels,
            "support_counts": ",".join(str(int(c)) for c in info.support_counts),
        },
    )
    print(
        f"gmm: {args.out} K={gmm.K} d={gmm.dim} tau_fit={gmm.tau_fit} "
        f"w_sp_exact={info.w_sp_exact:.6g} w_sp_sliced={info.w_sp_sliced:.6g}"
    )
    return 0


def _check_source_freedom(target_dir: str, meta_path: str) -> None:
    if not os.path.exists(meta_path):
        return
    meta = read_keyvalue(meta_path)
    source = meta.get("source_data", "")
    if not source:
        return
    target = os.path.realpath(target_dir)
    src = os.path.realpath(source)
    if target == src or target.startswith(src + os.sep) or src.startswith(target + os.sep):
        raise CliError("source data forbidden during adaptation", code=EXIT_SOURCE_FREEDOM)


def cmd_adapt(args) -> int:
    config = load_config(
        args.config,
        {
            "seed": args.seed,
            "adapt_steps": args.iters,
            "lambda_": getattr(args, "lambda"),
            "tau_filter": args.tau,
        },
    )
    target_dir = _require_dir(args.target, "target")
    _check_source_freedom(target_dir, args.gmm + ".meta")
    if os.path.exists(os.path.join(target_dir, "labels.tns1")):
        raise CliError("target directory must not contain a labels file")

    model = ad.load_model(args.ckpt)
    gmm = load_gmm(args.gmm)
    images, _, _ = ds.load_split(target_dir)
    target_pre = adapt_mod.pixel_embeddings(model, images)
    pre_model = adapt_mod._clone_model(model)

    model, report = adapt_mod.adapt_source_free(model, gmm, images, config)
    target_post = adapt_mod.pixel_embeddings(model, images)

    os.makedirs(args.out, exist_ok=True)
    ad.save_model(os.path.join(args.out, "adapted.mdl1"), model)
    with open(os.path.join(args.out, "report.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "ce", "swd", "total"])
        writer.writerows(
            (s, f"{ce:.8g}", f"{sw:.8g}", f"{t:.8g}") for s, ce, sw, t in report.steps
        )

    meta = read_keyvalue(args.gmm + ".meta") if os.path.exists(args.gmm + ".meta") else {}
    info = adapt_mod.EstimateInfo(
        float(meta.get("w_sp_exact", "nan")),
        float(meta.get("w_sp_sliced", "nan")),
        float(meta.get("e_source", "nan")),
        int(meta.get("n_pixels", 0)),
        np.array([]),
    )
    diag_rng = Rng(config.seed ^ 0xD1A6)
    pseudo = generate_pseudo_dataset(
        gmm,
        ad.classifier_probs_fn(model),
        min(4096, target_pre.shape[0]),
        config.tau_filter,
        diag_rng,
        config.max_draw_factor,
    )
    cap = 8192
    sub_pre = target_pre[diag_rng.subsample(target_pre.shape[0], min(cap, target_pre.shape[0]))]
    sub_post = target_post[diag_rng.subsample(target_post.shape[0], min(cap, target_post.shape[0]))]
    diag = adapt_mod.compute_bound_diagnostics(
        gmm, sub_pre, sub_post, config, estimate_info=info, pseudo_points=pseudo.Z, rng=diag_rng
    )
    diag_map = diag.as_dict()
    diag_map["kept_fraction"] = report.kept_fraction
    diag_map["wall_clock"] = f"{report.wall_clock:.3f}"
    write_keyvalue(os.path.join(args.out, "diagnostics.txt"), diag_map)

    # Fig.-3-style embedding exports (labels for target are unknown: -1).
    pred_pre = ad.forward_classify(pre_model, target_pre).argmax(axis=-1)
    pred_post = ad.forward_classify(model, target_post).argmax(axis=-1)
    emb_cap = diag_rng.subsample(target_pre.shape[0], min(4096, target_pre.shape[0]))
    save_embeddings(
        os.path.join(args.out, "gmm_samples.emb1"),
        pseudo.Z,
        pseudo.Y,
        ad.classifier_probs_fn(model)(pseudo.Z).argmax(axis=1),
    )
    save_embeddings(
        os.path.join(args.out, "target_pre.emb1"),
        target_pre[emb_cap],
        -np.ones(len(emb_cap)),
        pred_pre[emb_cap],
    )
    save_embeddings(
        os.path.join(args.out, "target_post.emb1"),
        target_post[emb_cap],
        -np.ones(len(emb_cap)),
        pred_post[emb_cap],
    )
    echo_config(config, args.out)
    print(
        f"adapted: {args.out} steps={len(report.steps)} "
        f"kept_fraction={report.kept_fraction:.4f} "
        f"w_tp_pre={diag.w_tp_pre_exact:.6g} w_tp_post={diag.w_tp_post_exact:.6g}"
    )
    return 0


def cmd_eval(args) -> int:
    model = ad.load_model(args.ckpt)
    images, labels, _ = _load_labeled(_require_dir(args.data, "data"))
    iou, miou = adapt_mod.evaluate_miou(model, images, labels)
    for k, value in enumerate(iou):
        shown = "undefined" if np.isnan(value) else f"{value:.4f}"
        print(f"iou_class_{k}={shown}")
    print(f"miou={miou:.4f}")
    if args.out:
        write_keyvalue(
            args.out,
            {f"iou_class_{k}": v for k, v in enumerate(iou)} | {"miou": miou},
        )
    return 0


def cmd_diagnose(args) -> int:
    path = os.path.join(args.report, "diagnostics.txt")
    if not os.path.exists(path):
        raise CliError(f"no diagnostics.txt under {args.report}")
    diag = read_keyvalue(path)
    for key in (
        "w_sp_exact",
        "w_sp_sliced",
        "w_tp_pre_exact",
        "w_tp_pre_sliced",
        "w_tp_post_exact",
        "w_tp_post_sliced",
        "one_minus_tau",
        "e_source",
        "kept_fraction",
    ):
        if key in diag:
            print(f"{key}={diag[key]}")
    return 0


def cmd_export_embeddings(args) -> int:
    model = ad.load_model(args.ckpt)
    images, labels, _ = ds.load_split(_require_dir(args.data, "data"))
    emb = adapt_mod.pixel_embeddings(model, images)
    pred = ad.forward_classify(model, emb).argmax(axis=-1)
    true = labels.reshape(-1) if labels is not None else -np.ones(emb.shape[0])
    os.makedirs(args.out, exist_ok=True)
    written = [os.path.join(args.out, "data.emb1")]
    save_embeddings(written[0], emb, true, pred)
    if args.ckpt_pre:
        pre_model = ad.load_model(args.ckpt_pre)
        emb_pre = adapt_mod.pixel_embeddings(pre_model, images)
        pred_pre = ad.forward_classify(pre_model, emb_pre).argmax(axis=-1)
        written.append(os.path.join(args.out, "data_pre.emb1"))
        save_embeddings(written[-1], emb_pre, true, pred_pre)
    if args.gmm:
        gmm = load_gmm(args.gmm)
        rng = Rng(args.seed or 0)
        pseudo = generate_pseudo_dataset(
            gmm, ad.classifier_probs_fn(model), 4096, 0.0, rng
        )
        written.append(os.path.join(args.out, "gmm_samples.emb1"))
        save_embeddings(
            written[-1],
            pseudo.Z,
            pseudo.Y,
            ad.classifier_probs_fn(model)(pseudo.Z).argmax(axis=1),
        )
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoadapt",
        description="Source-free adaptation via prototypical GMMs and sliced Wasserstein alignment",
    )
    parser.add_argument("--threads", type=int, default=1, help="worker threads (1 = bitwise reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write source/target/eval splits")
    p.add_argument("--spec", help="key=value domain spec file")
    p.add_argument("--preset", choices=["standard"], help="named frozen preset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on the labeled source split")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("estimate", help="fit the prototypical mixture")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("adapt", help="source-free adaptation on unlabeled target data")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--gmm", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--lambda", type=float, dest="lambda")
    p.add_argument("--tau", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="per-class IoU / mIoU on a labeled split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="print alignment diagnostics from a report dir")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("export-embeddings", help="EMB1 embedding exports")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ckpt-pre", dest="ckpt_pre")
    p.add_argument("--gmm")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except GenerationError as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ProtoAdaptError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: train-teacher, quantize, distill, eval, bench, landscape.
Every run resolves its full config (defaults < --config file < --set
overrides < explicit flags), embeds it in a JSON report together with the
seed, and is deterministic given that config.

Exit codes: 0 success, 2 bad arguments (argparse), 3 missing or invalid
input file, 4 computation failure (e.g. training divergence).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np
import torch

from . import bitkernel, codec, distill, landscape, quantcore, toymodel
from .bitkernel import LLAMA1_7B, ArchDims, cost_model, cost_report_dict
from .bitplane import plane_sparsity
from .checkpoint import load_checkpoint, save_checkpoint
from .reporting import Report, Timer, default_report_dir, derive_seed, write_report
from .toymodel import ModelConfig, TrainConfig, TinyDecoder

EXIT_BAD_INPUT = 3
EXIT_COMPUTE = 4

ARCH_PRESETS = {
    "llama1-7b": LLAMA1_7B,
    "toy": ArchDims(n_layers=2, d_model=128, d_ffn=512, vocab_size=256, n_heads=4,
                    n_ffn_mats=2),
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_tokens(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise CliError(f"input file not found: {path}", EXIT_BAD_INPUT)
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        raise CliError(f"input file is empty: {path}", EXIT_BAD_INPUT)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < --set k=v < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise CliError(f"config file not found: {args.config}", EXIT_BAD_INPUT)
        with open(args.config) as f:
            cfg.update(json.load(f))
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise CliError(f"--set expects key=value, got {kv!r}", EXIT_BAD_INPUT)
        k, v = kv.split("=", 1)
        try:
            cfg[k] = json.loads(v)
        except json.JSONDecodeError:
            cfg[k] = v
    for k in cfg:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            cfg[k] = v
    return cfg


def _report_path(args, default_name: str) -> str:
    if getattr(args, "report", None):
        return args.report
    return os.path.join(default_report_dir(), default_name)


def _finish(report: Report, timer: Timer, path: str):
    report.wall_clock_s = timer.elapsed
    write_report(report, path)
    print(f"report written to {path}")


def cmd_train_teacher(args) -> int:
    defaults = {
        "seed": 0, "steps": 2000, "batch_size": 16, "seq_len": 64,
        "lr": 1e-3, "weight_decay": 0.01,
        "n_layers": 2, "d_model": 128, "n_heads": 4, "d_ffn": 512,
        "vocab_size": 256, "max_seq_len": 64,
    }
    cfg = _resolve(args, defaults)
    tokens = _load_tokens(args.corpus)
    mconf = ModelConfig(
        n_layers=cfg["n_layers"], d_model=cfg["d_model"], n_heads=cfg["n_heads"],
        d_ffn=cfg["d_ffn"], vocab_size=cfg["vocab_size"],
        max_seq_len=cfg["max_seq_len"],
    )
    tconf = TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], seq_len=cfg["seq_len"],
        lr=cfg["lr"], weight_decay=cfg["weight_decay"], seed=cfg["seed"],
    )
    with Timer() as t:
        try:
            model, losses = toymodel.train_teacher(mconf, tokens, tconf)
        except RuntimeError as e:
            raise CliError(str(e), EXIT_COMPUTE)
        save_checkpoint(model, args.out, rng_seed=cfg["seed"])
    report = Report(
        command="train-teacher",
        config={**cfg, "corpus": args.corpus, "out": args.out},
        seed=cfg["seed"],
        metrics={
            "initial_loss": losses[0],
            "final_loss": losses[-1],
            "optimizer": {
                "kind": "adamw", "lr": tconf.lr,
                "weight_decay": tconf.weight_decay, "betas": list(tconf.betas),
            },
        },
    )
    _finish(report, t, _report_path(args, "train_teacher_report.json"))
    return 0


def _layer_quant_metrics(model: TinyDecoder) -> dict:
    per_layer = {}
    total_bits = 0.0
    n_quant_weights = 0
    eff_sum = 0.0
    for name, layer in model.quant_layers().items():
        n = layer.in_features * layer.out_features
        n_quant_weights += n
        ng = (layer.in_features + model.config.group_size - 1) // model.config.group_size
        n_scales = layer.out_features * ng
        if layer.mode == "rtn":
            sp = float(np.mean(layer.rtn_payload.codes == 0))
            per_layer[name] = {"sparsity": sp}
            total_bits += model.config.rtn_bits * n + 16 * n_scales
        elif layer.mode == "sign":
            # sign levels are +-1: no zeros, sparsity reported as 0
            per_layer[name] = {"sparsity": 0.0}
            total_bits += n + 16 * n_scales
        elif layer.mode == "fdb":
            d = layer.fdb_payload()
            s1 = plane_sparsity(d.plane1)
            s2 = plane_sparsity(d.plane2)
            eff = codec.effective_bits(d)
            per_layer[name] = {
                "sparsity_plane1": s1,
                "sparsity_plane2": s2,
                "sparsity_avg": (s1 + s2) / 2,
                "effective_bits": eff,
            }
            eff_sum += eff * n
            total_bits += 2 * n + 32 * n_scales
    fp_params = sum(
        p.numel()
        for name, p in model.state_dict().items()
        if not any(name.startswith(q) for q in model.quant_layers())
    )
    total_bits += 16 * fp_params
    metrics = {
        "per_layer": per_layer,
        "model_size_bytes": int(total_bits / 8),
    }
    if eff_sum:
        metrics["effective_bits_avg"] = eff_sum / n_quant_weights
        metrics["sparsity_plane1_avg"] = float(
            np.mean([v["sparsity_plane1"] for v in per_layer.values()])
        )
        metrics["sparsity_plane2_avg"] = float(
            np.mean([v["sparsity_plane2"] for v in per_layer.values()])
        )
        metrics["published_reference_values"] = {
            "avg_sparsity_llama1_7b": "exceeding 60%",
            "plane2_sparsity_llama1_7b": "surpassing 70%",
            "effective_bits_llama1_7b": 1.88,
        }
    return metrics


def cmd_quantize(args) -> int:
    defaults = {"method": "fdb", "group_size": 64, "bits": 2,
                "range_mode": quantcore.RANGE_ASYMMETRIC, "seed": 0}
    cfg = _resolve(args, defaults)
    if cfg["method"] not in ("rtn", "sign", "fdb"):
        raise CliError(f"unknown method {cfg['method']!r}", EXIT_BAD_INPUT)
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_BAD_INPUT)
    with Timer() as t:
        teacher, seed = load_checkpoint(args.checkpoint)
        try:
            model = toymodel.quantized_from(
                teacher,
                quant_mode=cfg["method"],
                group_size=cfg["group_size"],
                rtn_bits=cfg["bits"],
                range_mode=cfg["range_mode"],
            )
        except ValueError as e:
            raise CliError(str(e), EXIT_BAD_INPUT)
        save_checkpoint(model, args.out, rng_seed=seed)
        metrics = _layer_quant_metrics(model)
    report = Report(
        command="quantize",
        config={**cfg, "checkpoint": args.checkpoint, "out": args.out},
        seed=cfg["seed"],
        metrics=metrics,
    )
    _finish(report, t, _report_path(args, "quantize_report.json"))
    return 0


def cmd_distill(args) -> int:
    defaults = {
        "gamma": 0.1, "lam": 0.1, "lr": 1e-5, "batch_size": 2, "epochs": 1,
        "calib_samples": 512, "calib_len": 64, "seed": 0, "max_steps": None,
    }
    cfg = _resolve(args, defaults)
    if args.no_dad:
        cfg["lam"] = 0.0
    for path in (args.student, args.teacher):
        if not os.path.exists(path):
            raise CliError(f"checkpoint not found: {path}", EXIT_BAD_INPUT)
    with Timer() as t:
        student, student_seed = load_checkpoint(args.student)
        teacher, _ = load_checkpoint(args.teacher)
        if student.config.vocab_size != teacher.config.vocab_size:
            raise CliError("teacher/student config mismatch", EXIT_BAD_INPUT)
        dconf = distill.DistillConfig(
            gamma=cfg["gamma"], lam=cfg["lam"], learning_rate=cfg["lr"],
            batch_size=cfg["batch_size"], epochs=cfg["epochs"],
            calib_samples=cfg["calib_samples"], calib_len=cfg["calib_len"],
            seed=derive_seed(cfg["seed"], "calibration"),
            max_steps=cfg["max_steps"],
        )
        calib = distill.generate_calibration(teacher, dconf)
        try:
            trace = distill.finetune_fdb(student, teacher, calib, dconf)
        except ValueError as e:
            raise CliError(str(e), EXIT_BAD_INPUT)
        save_checkpoint(student, args.out, rng_seed=student_seed)
        if args.trace_csv:
            with open(args.trace_csv, "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["step", "ce", "dad", "total", "mean_alpha_drift"])
                for row in trace:
                    wr.writerow(
                        [row.step, row.ce, row.dad, row.total, row.mean_alpha_drift]
                    )
    report = Report(
        command="distill",
        config={**cfg, "student": args.student, "teacher": args.teacher,
                "out": args.out},
        seed=cfg["seed"],
        metrics={
            "steps": len(trace),
            "initial_total_loss": trace[0].total if trace else None,
            "final_total_loss": trace[-1].total if trace else None,
        },
    )
    _finish(report, t, _report_path(args, "distill_report.json"))
    return 0


def cmd_eval(args) -> int:
    defaults = {"seed": 0}
    cfg = _resolve(args, defaults)
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_BAD_INPUT)
    tokens = _load_tokens(args.text)
    if tokens.size < 2:
        raise CliError(f"eval text too short: {args.text}", EXIT_BAD_INPUT)
    with Timer() as t:
        model, _ = load_checkpoint(args.checkpoint)
        ppl = toymodel.perplexity(model, tokens)
    report = Report(
        command="eval",
        config={**cfg, "checkpoint": args.checkpoint, "text": args.text},
        seed=cfg["seed"],
        metrics={"perplexity": ppl, "n_tokens": int(tokens.size)},
    )
    _finish(report, t, _report_path(args, "eval_report.json"))
    return 0


def cmd_bench(args) -> int:
    defaults = {
        "preset": "llama1-7b", "seq_len": 32,
        "methods": ["fp16", "3bit", "2bit", "binarization", "fdb"],
        "sparsity_2bit": 0.483, "sparsity_fdb": 0.628, "seed": 0,
    }
    cfg = _resolve(args, defaults)
    if cfg["preset"] not in ARCH_PRESETS:
        raise CliError(
            f"unknown preset {cfg['preset']!r}; available: {sorted(ARCH_PRESETS)}",
            EXIT_BAD_INPUT,
        )
    arch = ARCH_PRESETS[cfg["preset"]]
    with Timer() as t:
        rows = {}
        for method in cfg["methods"]:
            sp = {"2bit": cfg["sparsity_2bit"], "fdb": cfg["sparsity_fdb"]}.get(
                method, 0.0
            )
            try:
                rows[method] = cost_report_dict(
                    cost_model(arch, cfg["seq_len"], method, sp, sp)
                )
            except ValueError as e:
                raise CliError(str(e), EXIT_BAD_INPUT)
    report = Report(
        command="bench",
        config=cfg,
        seed=cfg["seed"],
        metrics={
            "arch": asdict(arch),
            "cost": rows,
            "equiv_flops_formula":
                "weight_flops * discount[method] * (1 - sparsity) + attention_flops;"
                " discount: fp16=1, 3bit=3/16, 2bit=2/16, binarization=1/16,"
                " fdb=2/16 (two planes at 1/16 each, each skipping zero bits)",
        },
    )
    _finish(report, t, _report_path(args, "bench_report.json"))
    return 0


def cmd_landscape(args) -> int:
    defaults = {
        "method": "fdb", "rows": 256, "cols": 256, "probe_batch": 256,
        "group_size": 64, "grid_min": 0.25, "grid_max": 2.0, "grid_steps": 101,
        "seed": 0,
    }
    cfg = _resolve(args, defaults)
    if cfg["method"] not in landscape.LANDSCAPE_METHODS:
        raise CliError(f"unknown method {cfg['method']!r}", EXIT_BAD_INPUT)
    if cfg["grid_steps"] < 2 or cfg["grid_min"] <= 0 or cfg["grid_max"] <= cfg["grid_min"]:
        raise CliError("invalid grid spec", EXIT_BAD_INPUT)
    with Timer() as t:
        if args.checkpoint:
            if not os.path.exists(args.checkpoint):
                raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_BAD_INPUT)
            model, _ = load_checkpoint(args.checkpoint)
            layer = next(iter(model.quant_layers().values()))
            w = (
                layer.weight if "weight" in layer._parameters else layer.latent
            ).detach().numpy()
        else:
            rng = np.random.default_rng(derive_seed(cfg["seed"], "landscape-weights"))
            w = rng.normal(size=(cfg["rows"], cfg["cols"]))
        probe = landscape.make_probe(
            w.shape[1], cfg["probe_batch"], seed=derive_seed(cfg["seed"], "probe")
        )
        grid = np.linspace(cfg["grid_min"], cfg["grid_max"], cfg["grid_steps"])
        results = {
            m: landscape.grid_search_levels(w, probe, m, cfg["group_size"], grid)
            for m in landscape.LANDSCAPE_METHODS
        }
        surface = landscape.perturb_surface(
            w, probe, cfg["method"], cfg["group_size"], grid, grid,
            center=(results[cfg["method"]].best_m1, results[cfg["method"]].best_m2),
        )
        if args.out_csv:
            with open(args.out_csv, "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["axis1", "axis2", "loss"])
                wr.writerows(landscape.surface_csv_rows(surface))
        nesting_ok = (
            results["fdb"].best_loss <= results["2bit"].best_loss + 1e-9
            and results["2bit"].best_loss <= results["binarization"].best_loss + 1e-9
        )
    report = Report(
        command="landscape",
        config={**cfg, "checkpoint": args.checkpoint, "out_csv": args.out_csv},
        seed=cfg["seed"],
        metrics={
            "grid_search": {
                m: {"best_m1": r.best_m1, "best_m2": r.best_m2,
                    "best_loss": r.best_loss}
                for m, r in results.items()
            },
            "nesting_ok": bool(nesting_ok),
            "surface_min_loss": surface.min_loss,
            "surface_flatness": landscape.flatness(surface),
        },
    )
    _finish(report, t, _report_path(args, "landscape_report.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dualbin",
        description="Dual-binarization quantization toolkit for a desk-scale "
        "decoder-only transformer.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a resolved config key")
        sp.add_argument("--report", help="report output path")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train-teacher", help="train the full-precision teacher")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seq-len", type=int)
    sp.add_argument("--lr", type=float)
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("quantize", help="quantize a teacher checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", choices=["rtn", "sign", "fdb"])
    sp.add_argument("--group-size", type=int)
    sp.add_argument("--bits", type=int)
    sp.add_argument("--range-mode")
    common(sp)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("distill", help="fine-tune fdb scales against a teacher")
    sp.add_argument("--student", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--no-dad", action="store_true", help="set lambda to 0")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--calib-samples", type=int)
    sp.add_argument("--calib-len", type=int)
    sp.add_argument("--trace-csv")
    common(sp)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("eval", help="perplexity of a checkpoint on a text file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--text", required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="cost-model table across methods")
    sp.add_argument("--preset", choices=sorted(ARCH_PRESETS))
    sp.add_argument("--seq-len", type=int)
    sp.add_argument("--sparsity-2bit", type=float)
    sp.add_argument("--sparsity-fdb", type=float)
    common(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("landscape", help="grid search and loss surfaces")
    sp.add_argument("--checkpoint", help="use a checkpoint layer's weights")
    sp.add_argument("--method", choices=list(landscape.LANDSCAPE_METHODS))
    sp.add_argument("--rows", type=int)
    sp.add_argument("--cols", type=int)
    sp.add_argument("--probe-batch", type=int)
    sp.add_argument("--group-size", type=int)
    sp.add_argument("--grid-min", type=float)
    sp.add_argument("--grid-max", type=float)
    sp.add_argument("--grid-steps", type=int)
    sp.add_argument("--out-csv")
    common(sp)
    sp.set_defaults(func=cmd_landscape)
    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)  # fixed reduction order for determinism
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error[{e.code}]: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())

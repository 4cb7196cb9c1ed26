"""``ddlab`` command line: gen-data, train-clip, train-captioner, attack, eval, report.

Exit codes: 0 success, 1 usage error, 2 runtime error.

Run directory layout::

    RUN/config.resolved
    RUN/checkpoints/*.ddf
    RUN/metrics.jsonl
    RUN/reports/eval.json, eval.csv
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from fractions import Fraction

import numpy as np

from . import __version__, attacks, data, evaluate, models, report, train
from .autodiff import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, default_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run directory helpers ------------------------------------------------------------------
class MetricLog:
    """Append-only metrics.jsonl writer: one record per (tag, metric, value)."""

    def __init__(self, run_dir, run_id=None):
        self.path = os.path.join(run_dir, "metrics.jsonl")
        self.run_id = run_id or os.path.basename(os.path.normpath(run_dir))

    def write(self, tag, metrics):
        with open(self.path, "a", encoding="utf-8") as f:
            for name in sorted(metrics):
                v = metrics[name]
                if isinstance(v, (bool, np.bool_)):
                    v = bool(v)
                elif isinstance(v, (int, float, np.floating, np.integer)):
                    v = float(v)
                else:
                    continue
                f.write(json.dumps({"run": self.run_id, "tag": tag, "metric": name, "value": v,
                                    "time": time.time()}, sort_keys=True) + "\n")


def prepare_run(run_dir, cfg):
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "reports"), exist_ok=True)
    with open(os.path.join(run_dir, "config.resolved"), "w", encoding="utf-8") as f:
        f.write(cfg.resolved())
    return MetricLog(run_dir)


def model_config(cfg, resolution=None):
    m = cfg["model"]
    return models.ModelConfig(resolution=resolution or cfg["data"]["resolution"], grid=m["grid"],
                              width=m["width"], heads=m["heads"], blocks=m["blocks"],
                              mlp_ratio=m["mlp_ratio"], embed_dim=m["embed_dim"])


def _resolution_of(arrays, grid):
    fan_in = arrays["vision.patch.w"].shape[0]
    patch = math.isqrt(fan_in // 3)
    return patch * grid


def load_dual_encoder(path, cfg):
    arrays = load_checkpoint(path)
    mc = model_config(cfg, _resolution_of(arrays, cfg["model"]["grid"]))
    params = models.init_dual_encoder(mc, 0)
    params.load_arrays(arrays)
    params.set_frozen("text.", True)
    return params


def load_captioner(path, cfg, resolution):
    cap = models.init_captioner(model_config(cfg, resolution), 0)
    cap.load_arrays(load_checkpoint(path))
    return cap


def clip_stages(cfg, adversarial):
    c = cfg["clip"]
    if cfg.stages():
        return [train.TrainStageConfig(
            resolution=s["resolution"], steps=s["steps"] if adversarial else 0,
            eps=s["eps"] if adversarial else 0.0, samples=s["samples"], batch_size=c["batch_size"],
            lr=c["lr"], weight_decay=c["weight_decay"], cap_weight=c["cap_weight"],
            attack_caption=c["attack_caption"], vision_only=c["vision_only"], clean_mix=c["clean_mix"])
            for s in cfg.stages()]
    stages = train.default_clip_stages(unit=c["unit"], adversarial=adversarial, batch_size=c["batch_size"],
                                       lr=c["lr"], cap_weight=c["cap_weight"])
    return [train.replace(s, weight_decay=c["weight_decay"], attack_caption=c["attack_caption"],
                          vision_only=c["vision_only"], clean_mix=c["clean_mix"]) for s in stages]


def captioner_config(cfg):
    c = cfg["captioner"]
    base = train.InstructionTuneConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"],
                                       weight_decay=c["weight_decay"], clean_mix=c["clean_mix"])
    return train.variant_config(c["variant"], base, c["adv_steps"], c["adv_eps"], c["vision_lr_ratio"])


def _read_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        cfg.set(key.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg.set("run.seed", str(args.seed))
    return cfg


# -- subcommands ------------------------------------------------------------------------
def cmd_gen_data(args):
    if args.res not in data.RESOLUTIONS:
        raise UsageError(f"--res must be one of {data.RESOLUTIONS}")
    if args.n < data.NUM_CLASSES:
        raise UsageError(f"--n must be at least {data.NUM_CLASSES}")
    out = args.out
    if out.endswith(os.sep) or os.path.isdir(out):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, f"data-{args.res}px-seed{args.seed}.dds")
    ds = data.make_dataset(args.n, args.res, args.seed)
    if args.split != "all":
        ds = ds.take_split(args.split)
    data.save_dataset(out, ds)
    print(out)


def cmd_train_clip(args):
    cfg = _read_config(args)
    c = cfg["clip"]
    for key, allowed in (("patch_mode", models.PATCH_MODES), ("adv_patch_mode", models.PATCH_MODES),
                         ("vision_init", ("scratch", "clean"))):
        if c[key] not in allowed:
            raise UsageError(f"clip.{key} must be one of {allowed}, got {c[key]!r}")
    log = prepare_run(args.run, cfg)
    seed = cfg["run"]["seed"]
    ckpt = os.path.join(args.run, "checkpoints")
    count = cfg["data"]["count"]
    if args.text_from:
        clean = load_dual_encoder(args.text_from, cfg)
        head = None
    else:
        stages = clip_stages(cfg, adversarial=False)
        clean, head, hist = train.pretrain_text_encoder(model_config(cfg, stages[0].resolution), stages, seed,
                                                         count, cap_weight=c["cap_weight"],
                                                         log=lambda m: log.write(f"clean/{m['step']}", m),
                                                         patch_mode=c["patch_mode"])
        save_checkpoint(os.path.join(ckpt, "clean.ddf"), clean.arrays())
        if head is not None:
            save_checkpoint(os.path.join(ckpt, "clean_head.ddf"), head.arrays())
    if not c["adversarial"]:
        save_checkpoint(os.path.join(ckpt, "clip.ddf"), clean.arrays())
        return
    stages = clip_stages(cfg, adversarial=True)
    if clean.config.resolution != stages[0].resolution and c["vision_init"] == "clean":
        raise UsageError("vision_init=clean needs the clean encoder at the first stage resolution")
    params, head, _ = train.train_delta_clip(clean, head, stages, seed, count,
                                             log=lambda m: log.write(f"adv/{m['step']}", m),
                                             vision_init=c["vision_init"], patch_mode=c["adv_patch_mode"])
    save_checkpoint(os.path.join(ckpt, "clip.ddf"), params.arrays())
    if head is not None:
        save_checkpoint(os.path.join(ckpt, "clip_head.ddf"), head.arrays())


def cmd_train_captioner(args):
    cfg = _read_config(args)
    if args.variant:
        cfg.set("captioner.variant", args.variant)
    if cfg["captioner"]["variant"] not in train.CAPTIONER_VARIANTS:
        raise UsageError(f"unknown variant; choose from {sorted(train.CAPTIONER_VARIANTS)}")
    log = prepare_run(args.run, cfg)
    vision = load_dual_encoder(args.vision, cfg)
    tune = captioner_config(cfg)
    cap, vision, _ = train.train_captioner(vision, tune, cfg["run"]["seed"], cfg["data"]["count"],
                                           vision.config.resolution,
                                           log=lambda m: log.write(f"captioner/{m['step']}", m))
    ckpt = os.path.join(args.run, "checkpoints")
    save_checkpoint(os.path.join(ckpt, "captioner.ddf"), cap.arrays())
    save_checkpoint(os.path.join(ckpt, "vision.ddf"), vision.arrays())


def cmd_attack(args):
    cfg = _read_config(args)
    ds = data.load_dataset(args.data)
    vision = load_dual_encoder(args.checkpoint, cfg)
    rows = evaluate.subset_rows(len(ds), min(args.count, len(ds)), cfg["run"]["seed"])
    x = ds.images[rows]
    norm = math.inf if args.norm == "inf" else 2
    budget = attacks.PerturbationBudget(eps=args.eps, steps=args.steps, norm=norm)
    result = {"kind": args.kind, "loss": args.loss, "eps": args.eps, "steps": args.steps,
              "rows": rows.tolist()}
    if args.loss in ("nll", "target"):
        if not args.captioner:
            raise UsageError("--captioner is required for caption attacks")
        cap = load_captioner(args.captioner, cfg, vision.config.resolution)
        ins = data.tokenize(args.instruction, eos=False)
        if args.loss == "target":
            if not args.target:
                raise UsageError("--target is required for targeted attacks")
            res = attacks.targeted_caption_attack(cap, vision, x, ins, data.tokenize(args.target, eos=False), budget)
            result["success_rate"] = float(res.success.mean())
            result["outputs"] = [data.detokenize(o) for o in res.extra["outputs"]]
        else:
            specs = ds.specs()
            samples = [models.InstructionSample(img, ins, data.tokenize(
                data.answer_text(specs[r], args.instruction), eos=False)) for img, r in zip(x, rows)]
            res = _run(args.kind, attacks.instruction_objective(cap, vision, samples), x, budget)
            result["outputs"] = [data.detokenize(o) for o in models.generate_batch(cap, vision, x + res.delta, ins)]
    else:
        head = evaluate.build_zero_shot_head(vision)
        labels = ds.labels[rows]
        oracle = attacks.classifier_objective(args.loss, lambda xt: evaluate.zero_shot_logits(vision, head, xt),
                                              labels, params=list(vision.tensors.values()))
        res = _run(args.kind, oracle, x, budget)
        clean = evaluate.predict(vision, head, x) == labels
        adv = evaluate.predict(vision, head, x + res.delta) == labels
        result.update({"clean_accuracy": float(clean.mean()), "robust_accuracy": float((clean & adv).mean())})
    result.update({"linf": res.linf, "domain_violations": res.domain_violations,
                   "best_value": np.asarray(res.best_value).tolist()})
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)


def _run(kind, oracle, x, budget):
    if kind == "fgsm":
        return attacks.fgsm(oracle, x, budget.eps)
    if kind == "pgd":
        return attacks.pgd(oracle, x, budget)
    return attacks.apgd(oracle, x, budget)


def run_eval(cfg, vision, cap=None, val=None, model_name=""):
    """Zero-shot (and, with a captioner, caption + targeted) evaluation as one EvalReport."""
    seed = cfg["run"]["seed"]
    e = cfg["eval"]
    if val is None:
        val = data.make_dataset(cfg["data"]["count"], vision.config.resolution, cfg["data"]["seed"]).take_split("val")
    if len(val) == 0:
        raise ValueError("validation split is empty; increase [data] count")
    rep = evaluate.EvalReport(model=model_name, seed=seed)
    if cap is None:
        head = evaluate.build_zero_shot_head(vision)
        for i, eps in enumerate(cfg.eps_list("zero_shot_eps")):
            part = evaluate.eval_robust_accuracy(vision, head, val, eps, e["zero_shot_steps"],
                                                 min(e["zero_shot_count"], len(val)), seed)
            if i:
                part.rows = [r for r in part.rows if r["metric"] != "clean_accuracy"]
            rep.merge(part)
    else:
        for i, eps in enumerate(cfg.eps_list("caption_eps")):
            part = evaluate.eval_caption_robustness(cap, vision, val, eps, e["caption_steps"],
                                                    min(e["caption_count"], len(val)), seed)
            if i:
                part.rows = [r for r in part.rows if r["attack"] != "none"]
            rep.merge(part)
        for eps in cfg.eps_list("targeted_eps"):
            rep.merge(evaluate.eval_targeted_asr(cap, vision, val, evaluate.DEFAULT_TARGETS, eps,
                                                 e["targeted_steps"], e["targets_per_string"], seed))
    return rep


def cmd_eval(args):
    cfg = _read_config(args)
    os.makedirs(os.path.join(args.run, "reports"), exist_ok=True)
    vision = load_dual_encoder(args.checkpoint, cfg)
    cap = load_captioner(args.captioner, cfg, vision.config.resolution) if args.captioner else None
    val = data.load_dataset(args.data) if args.data else None
    rep = run_eval(cfg, vision, cap, val, args.name or os.path.basename(os.path.normpath(args.run)))
    MetricLog(args.run).write("eval", {f"{r['metric']}|{r['attack']}|{r['epsilon']:.6g}": r["value"]
                                       for r in rep.rows})
    with open(report.report_path(args.run), "w", encoding="utf-8") as f:
        f.write(rep.to_json() + "\n")
    with open(os.path.join(args.run, "reports", "eval.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(rep.to_csv())
    print(rep.to_csv(), end="")


def cmd_report(args):
    for path in report.emit_report(args.runs, args.out):
        print(path)


# -- parser ----------------------------------------------------------------------------------
def build_parser():
    p = _Parser(prog="ddlab", description="Desk-scale adversarial vision-language lab.")
    p.add_argument("--version", action="version", version=f"ddlab {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def config_flags(sp):
        sp.add_argument("--config", help="run config file (sectioned key = value)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="override run.seed")

    g = sub.add_parser("gen-data", help="render a DDS1 dataset")
    g.add_argument("--out", required=True, help="output file, or directory ending in /")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--res", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=("all", "train", "val"), default="all")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-clip", help="clean pretraining and staged adversarial training")
    config_flags(t)
    t.add_argument("--run", required=True, help="run directory")
    t.add_argument("--text-from", help="clean dual-encoder checkpoint providing the frozen text tower")
    t.set_defaults(func=cmd_train_clip)

    c = sub.add_parser("train-captioner", help="instruction-tune a captioner variant")
    config_flags(c)
    c.add_argument("--run", required=True)
    c.add_argument("--vision", required=True, help="dual-encoder checkpoint")
    c.add_argument("--variant", choices=sorted(train.CAPTIONER_VARIANTS))
    c.set_defaults(func=cmd_train_captioner)

    a = sub.add_parser("attack", help="run one attack on a checkpoint")
    config_flags(a)
    a.add_argument("--checkpoint", required=True, help="dual-encoder checkpoint")
    a.add_argument("--captioner", help="captioner checkpoint (caption attacks)")
    a.add_argument("--data", required=True, help="DDS1 dataset")
    a.add_argument("--kind", choices=("fgsm", "pgd", "apgd"), default="apgd")
    a.add_argument("--loss", choices=("ce", "dlr", "nll", "target"), default="ce")
    a.add_argument("--eps", type=_eps, default=4 / 255)
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--norm", choices=("inf", "2"), default="inf")
    a.add_argument("--target", default="")
    a.add_argument("--instruction", default=evaluate.DEFAULT_INSTRUCTION)
    a.add_argument("--count", type=int, default=32)
    a.add_argument("--out", help="write the JSON result here")
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("eval", help="evaluate a checkpoint into RUN/reports")
    config_flags(e)
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--captioner")
    e.add_argument("--data", help="DDS1 evaluation set (default: the config's val split)")
    e.add_argument("--name", help="model name in the report")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tables and SVG figures from run directories")
    r.add_argument("--runs", nargs="*", default=[])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def _eps(text):
    try:
        v = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid radius {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("radius must be non-negative")
    return v


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("ddlab: a subcommand is required (see --help)")
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:       # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:        # noqa: BLE001 - reported, mapped to the runtime exit code
        print(f"ddlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

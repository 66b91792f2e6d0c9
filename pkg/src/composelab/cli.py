"""Command-line entry point wiring configs, artifacts, and the experiment
pipeline: gen-data, train-base, finetune, sample, tta-sample, eval,
attn-dump, ablate.

Exit codes: 0 success, 1 user error (bad config/inputs), 2 internal error.
Heavy imports happen after --threads is applied, which must precede the
first numpy import to take effect.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

COMMANDS = ("gen-data", "train-base", "finetune", "sample", "tta-sample",
            "eval", "attn-dump", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="composelab",
        description="compositional text-to-image diffusion laboratory")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON run config (strictly validated)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/worker threads")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (default out-<command>)")
    return parser


# ---------------------------------------------------------------------------
# shared plumbing (imports deferred until after thread setup)

def _modules():
    from . import (config, diffusion, evaluation, finetune, model,
                   objectives, reporting, scenes)
    return config, diffusion, evaluation, finetune, model, objectives, \
        reporting, scenes


def _build_vocab(cfg):
    from . import scenes as sc
    spec = cfg["dataset"]["concepts"]
    max_tokens = cfg["model"]["max_tokens"]
    if spec is None:
        return sc.default_vocab(max_tokens=max_tokens)
    concepts = tuple(sc.Concept(n, s, tuple(c)) for n, s, c in spec)
    return sc.ConceptVocab(concepts, max_tokens=max_tokens)


def _vocab_near_checkpoint(cfg, ckpt_path: Path):
    from . import scenes as sc
    sibling = Path(ckpt_path).with_name("vocab.json")
    if sibling.exists():
        return sc.ConceptVocab.from_dict(json.loads(sibling.read_text()))
    if cfg["paths"]["dataset"]:
        _, vocab = sc.load_dataset(cfg["paths"]["dataset"])
        return vocab
    return _build_vocab(cfg)


def _model_config(cfg, vocab):
    from . import model as md
    return md.ModelConfig(**cfg["model"], vocab_size=vocab.size)


def _schedule(cfg, mconfig):
    from . import diffusion as df
    return df.make_schedule(mconfig.timesteps, cfg["schedule"]["beta_start"],
                            cfg["schedule"]["beta_end"])


def _sample_config(cfg):
    from . import diffusion as df
    s = cfg["sample"]
    return df.SampleConfig(num_steps=s["num_steps"],
                           guidance_scale=s["guidance_scale"],
                           sampler=s["sampler"], seed=cfg["seed"])


def _weights(cfg):
    from . import objectives as ob
    return ob.LossWeights(**cfg["weights"])


def _ft_config(cfg):
    from . import finetune as fi
    f = cfg["finetune"]
    return fi.FinetuneConfig(
        steps=f["steps"], batch_size=f["batch_size"],
        lr_schedule=f["lr_schedule"], lr=f["lr"], peak_lr=f["peak_lr"],
        warmup=f["warmup"], weights=_weights(cfg), selector=f["selector"],
        t_range=tuple(f["t_range"]), latent_source=f["latent_source"],
        x0_pool=f["x0_pool"], norm_batch=f["norm_batch"],
        kernel_size=f["kernel_size"], sigma=f["sigma"], seed=f["seed"])


def _tta_config(cfg):
    from . import finetune as fi
    t = cfg["tta"]
    return fi.TTAConfig(refine_steps=t["refine_steps"],
                        step_size=t["step_size"],
                        weights=_weights_no_norm(cfg),
                        kernel_size=t["kernel_size"], sigma=t["sigma"])


def _weights_no_norm(cfg):
    from . import objectives as ob
    w = cfg["weights"]
    return ob.LossWeights(lambda_norm=0.0, lambda_sep=w["lambda_sep"],
                          lambda_en=w["lambda_en"])


def _require_checkpoint(cfg):
    path = cfg["paths"]["checkpoint"]
    if not path:
        raise ValueError("paths.checkpoint is required for this command")
    from . import model as md
    return md.load_checkpoint(path)


def _split(cfg, vocab):
    from . import scenes as sc
    frac = cfg["split"]["held_out_fraction"]
    return sc.split_concepts(vocab, frac, cfg["split"]["seed"])


def _finetune_pairs(cfg, vocab, seen):
    from . import finetune as fi
    from . import scenes as sc
    if cfg["finetune"]["pairs"] is not None:
        return fi.make_pair_schedule(cfg["finetune"]["pairs"], seen=seen)
    bias = _bias(cfg)
    pool = [p for p in sc.held_pairs(bias, vocab)
            if p[0] in seen and p[1] in seen]
    if not pool:
        raise ValueError("no finetune pairs: give finetune.pairs explicitly")
    return fi.make_pair_schedule(pool, seen=seen)


def _bias(cfg):
    from . import scenes as sc
    b = cfg["bias"]
    pair_weights = b["pair_weights"]
    if pair_weights is not None:
        pair_weights = tuple(tuple(row) for row in pair_weights)
    dominance = tuple(b["dominance"]) if b["dominance"] is not None else None
    return sc.BiasConfig(fraction_single=b["fraction_single"],
                         dominance=dominance, pair_weights=pair_weights)


def _prompt_list(cfg, vocab):
    from . import scenes as sc
    texts = cfg["sample"]["prompts"]
    if not texts:
        raise ValueError("sample.prompts must list at least one prompt")
    prompts = [sc.parse_prompt_line(vocab, t) for t in texts]
    count = max(int(cfg["sample"]["count"]), 1)
    prompts = [p for p in prompts for _ in range(count)]
    seeds = cfg["sample"]["seeds"]
    if seeds is None:
        import numpy as np
        gen = np.random.Generator(np.random.PCG64(cfg["seed"]))
        seeds = [int(s) for s in gen.integers(0, 2 ** 31, size=len(prompts))]
    if len(seeds) != len(prompts):
        raise ValueError("sample.seeds must match the expanded prompt list")
    return prompts, seeds


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg, out: Path):
    from . import scenes as sc
    vocab = _build_vocab(cfg)
    items = sc.make_dataset(vocab, _bias(cfg), cfg["dataset"]["n"],
                            cfg["dataset"]["seed"], cfg["dataset"]["canvas"])
    sc.save_dataset(out / "dataset", items, vocab)
    print(f"wrote {len(items)} scenes to {out / 'dataset'}")


def cmd_train_base(cfg, out: Path):
    from . import diffusion as df
    from . import model as md
    from . import reporting as rp
    from . import scenes as sc
    if not cfg["paths"]["dataset"]:
        raise ValueError("paths.dataset is required for train-base")
    items, vocab = sc.load_dataset(cfg["paths"]["dataset"])
    mconfig = _model_config(cfg, vocab)
    schedule = _schedule(cfg, mconfig)
    t = cfg["train"]
    tc = df.TrainConfig(steps=t["steps"], batch_size=t["batch_size"],
                        lr=t["lr"], warmup=t["warmup"],
                        min_lr_frac=t["min_lr_frac"], p_uncond=t["p_uncond"],
                        seed=t["seed"], log_every=t["log_every"])
    params, log = df.train_base(items, mconfig, schedule, vocab, tc,
                                progress=lambda s, l: print(f"step {s}: loss {l:.4f}"))
    md.save_checkpoint(out / "base.ckpt", params, mconfig)
    (out / "vocab.json").write_text(json.dumps(vocab.to_dict(), sort_keys=True))
    rp.write_jsonl(out / "train_log.jsonl", log)
    rp.training_curves(out / "train_curves.png", log)
    print(f"checkpoint: {out / 'base.ckpt'}")


def cmd_finetune(cfg, out: Path):
    from . import finetune as fi
    from . import model as md
    from . import reporting as rp
    params, mconfig = _require_checkpoint(cfg)
    vocab = _vocab_near_checkpoint(cfg, Path(cfg["paths"]["checkpoint"]))
    schedule = _schedule(cfg, mconfig)
    seen, _ = _split(cfg, vocab)
    pairs = _finetune_pairs(cfg, vocab, seen)
    ft = _ft_config(cfg)
    sample_config = _sample_config(cfg)
    norm_pairs = []
    if ft.weights.lambda_norm > 0:
        n = cfg["finetune"]["norm_n"] or 4 * ft.norm_batch
        norm_pairs = fi.generate_norm_data(params, mconfig, schedule, vocab,
                                           seen, n, cfg["finetune"]["norm_seed"],
                                           sample_config)
    tuned, log = fi.compositional_finetune(params, mconfig, schedule, vocab,
                                           pairs, norm_pairs, ft, sample_config)
    md.save_checkpoint(out / "tuned.ckpt", tuned, mconfig)
    (out / "vocab.json").write_text(json.dumps(vocab.to_dict(), sort_keys=True))
    rp.write_jsonl(out / "finetune_log.jsonl", log)
    rp.training_curves(out / "finetune_curves.png", log)
    print(f"checkpoint: {out / 'tuned.ckpt'}")


def _run_sampling(cfg, out: Path, use_tta: bool):
    from . import evaluation as ev
    from . import reporting as rp
    from . import scenes as sc
    params, mconfig = _require_checkpoint(cfg)
    vocab = _vocab_near_checkpoint(cfg, Path(cfg["paths"]["checkpoint"]))
    schedule = _schedule(cfg, mconfig)
    prompts, seeds = _prompt_list(cfg, vocab)
    sample_config = _sample_config(cfg)
    tta = _tta_config(cfg) if use_tta else None
    images, _ = ev.sample_prompts(params, mconfig, schedule, vocab, prompts,
                                  seeds, sample_config,
                                  chunk=cfg["eval"]["chunk"], tta=tta)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, (img, prompt, seed) in enumerate(zip(images, prompts, seeds)):
        stem = f"sample_{i:04d}"
        sc.save_png(img_dir / f"{stem}.png", img)
        rp.write_json(img_dir / f"{stem}.json", {
            "prompt": prompt.text, "seed": int(seed),
            "sampler": sample_config.sampler,
            "num_steps": sample_config.num_steps,
            "guidance_scale": sample_config.guidance_scale,
            "tta": None if tta is None else {
                "refine_steps": tta.refine_steps, "step_size": tta.step_size},
        })
    print(f"wrote {len(images)} images to {img_dir}")


def cmd_sample(cfg, out: Path):
    _run_sampling(cfg, out, use_tta=False)


def cmd_tta_sample(cfg, out: Path):
    _run_sampling(cfg, out, use_tta=True)


def _reference_stats(cfg, vocab, mconfig, schedule, seen):
    from . import evaluation as ev
    from . import model as md
    base_path = cfg["paths"]["base_checkpoint"] or cfg["paths"]["checkpoint"]
    base_params, base_config = md.load_checkpoint(base_path)
    return ev.reference_stats(base_params, base_config, schedule, vocab, seen,
                              cfg["eval"]["reference_n"], cfg["eval"]["seed"],
                              _sample_config(cfg), chunk=cfg["eval"]["chunk"])


def _eval_image_dir(cfg, out: Path):
    """Detector metrics over already-sampled images (PNG + JSON sidecars)."""
    from . import evaluation as ev
    from . import reporting as rp
    from . import scenes as sc
    img_dir = Path(cfg["paths"]["images"])
    pngs = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if not pngs:
        raise ValueError(f"no inputs: {img_dir} holds no images")
    vocab = _build_vocab(cfg) if not cfg["paths"]["checkpoint"] \
        else _vocab_near_checkpoint(cfg, Path(cfg["paths"]["checkpoint"]))
    detector = ev.Detector(vocab)
    prompts, images = [], []
    for png in pngs:
        sidecar = png.with_suffix(".json")
        if not sidecar.exists():
            raise ValueError(f"no prompt sidecar for {png.name}")
        prompts.append(sc.parse_prompt_line(
            vocab, json.loads(sidecar.read_text())["prompt"]))
        images.append(sc.load_png(png))
    results = [detector.detect(img) for img in images]
    threshold = cfg["eval"]["threshold"]
    rate = ev.success_rate(results, prompts, vocab, threshold)
    mean, std = ev.alignment_proxy(results, prompts, vocab)
    report = ev.EvalReport(protocol="image-dir", n_prompts=len(prompts),
                           threshold=threshold, success_rate=rate,
                           alignment_mean=mean, alignment_std=std,
                           prompts=[p.text for p in prompts])
    rp.write_json(out / "report.json", [report.to_dict()])
    rp.write_report_csv(out / "report.csv", [report])
    rp.report_figure(out / "report.png", [report])
    print(f"image-dir: success={rate:.3f} align={mean:.3f}")


def cmd_eval(cfg, out: Path):
    import numpy as np

    from . import evaluation as ev
    from . import reporting as rp
    from . import scenes as sc
    if cfg["paths"]["images"]:
        _eval_image_dir(cfg, out)
        return
    params, mconfig = _require_checkpoint(cfg)
    vocab = _vocab_near_checkpoint(cfg, Path(cfg["paths"]["checkpoint"]))
    schedule = _schedule(cfg, mconfig)
    seen, unseen = _split(cfg, vocab)
    seen = seen or vocab.names()
    detector = ev.Detector(vocab)
    reference = _reference_stats(cfg, vocab, mconfig, schedule, seen)
    sample_config = _sample_config(cfg)
    e = cfg["eval"]
    tta = _tta_config(cfg) if e["use_tta"] else None
    reports = []
    if e["pairs"]:
        prompts = [sc.make_prompt(vocab, list(p)) for p in e["pairs"]]
        gen = np.random.Generator(np.random.PCG64(e["seed"] + 0xE7A1))
        seeds = [int(s) for s in gen.integers(0, 2 ** 31, size=len(prompts))]
        reports.append(ev.evaluate_prompts(
            params, mconfig, schedule, vocab, prompts, seeds, sample_config,
            e["threshold"], detector=detector, reference=reference,
            protocol="pairs", chunk=e["chunk"], tta=tta))
    for protocol in e["protocols"]:
        prompts = ev.protocol_prompts(vocab, protocol, e["n_prompts"],
                                      e["seed"], seen, unseen)
        gen = np.random.Generator(np.random.PCG64(e["seed"] + 0xE7A1))
        seeds = [int(s) for s in gen.integers(0, 2 ** 31, size=len(prompts))]
        reports.append(ev.evaluate_prompts(
            params, mconfig, schedule, vocab, prompts, seeds, sample_config,
            e["threshold"], detector=detector, reference=reference,
            protocol=protocol, chunk=e["chunk"], tta=tta))
    if not reports:
        raise ValueError("nothing to evaluate: no pairs and no protocols")
    rp.write_json(out / "report.json", [r.to_dict() for r in reports])
    rp.write_report_csv(out / "report.csv", reports)
    rp.report_figure(out / "report.png", reports)
    for rep in reports:
        print(f"{rep.protocol}: success={rep.success_rate:.3f} "
              f"align={rep.alignment_mean:.3f}")


def cmd_attn_dump(cfg, out: Path):
    from . import evaluation as ev
    from . import objectives as ob
    from . import reporting as rp
    from . import scenes as sc
    params, mconfig = _require_checkpoint(cfg)
    vocab = _vocab_near_checkpoint(cfg, Path(cfg["paths"]["checkpoint"]))
    schedule = _schedule(cfg, mconfig)
    prompts, seeds = _prompt_list(cfg, vocab)
    sample_config = _sample_config(cfg)
    images, traces = ev.sample_prompts(params, mconfig, schedule, vocab,
                                       prompts, seeds, sample_config,
                                       record=True, chunk=cfg["eval"]["chunk"])
    for i, (img, trace, prompt) in enumerate(zip(images, traces, prompts)):
        names = [vocab.concept_at(prompt.token_ids[j]).name
                 for j in prompt.concept_indices]
        masks = ob.aggregate_masks(trace, prompt.concept_indices, mconfig.grid,
                                   prompt_id=prompt.text)
        rp.export_heatmaps(out / f"prompt_{i:03d}", masks, names, image=img)
        sc.save_png(out / f"prompt_{i:03d}" / "sample.png", img)
    print(f"wrote heatmaps for {len(images)} prompts to {out}")


def cmd_ablate(cfg, out: Path):
    import numpy as np

    from . import evaluation as ev
    from . import finetune as fi
    from . import objectives as ob
    from . import reporting as rp
    from . import scenes as sc
    from .autodiff import Tensor
    params, mconfig = _require_checkpoint(cfg)
    vocab = _vocab_near_checkpoint(cfg, Path(cfg["paths"]["checkpoint"]))
    schedule = _schedule(cfg, mconfig)
    seen, unseen = _split(cfg, vocab)
    seen = seen or vocab.names()
    pairs = _finetune_pairs(cfg, vocab, seen)
    ft = _ft_config(cfg)
    sample_config = _sample_config(cfg)
    detector = ev.Detector(vocab)
    reference = _reference_stats(cfg, vocab, mconfig, schedule, seen)
    e = cfg["eval"]
    eval_pairs = e["pairs"] or [list(p) for p in pairs.pairs]
    prompts = [sc.make_prompt(vocab, list(p)) for p in eval_pairs]
    if len(prompts) > e["n_prompts"]:
        prompts = prompts[: e["n_prompts"]]
    while len(prompts) < e["n_prompts"]:
        prompts.append(prompts[len(prompts) % len(eval_pairs)])
    gen = np.random.Generator(np.random.PCG64(e["seed"] + 0xAB1A))
    seeds = [int(s) for s in gen.integers(0, 2 ** 31, size=len(prompts))]

    def evaluate(tree, label):
        return ev.evaluate_prompts(tree, mconfig, schedule, vocab, prompts,
                                   seeds, sample_config, e["threshold"],
                                   detector=detector, reference=reference,
                                   protocol=label, chunk=e["chunk"])

    w = ft.weights
    loss_variants = [
        ("sep-only", ob.LossWeights(w.lambda_norm, w.lambda_sep, 0.0)),
        ("en-only", ob.LossWeights(w.lambda_norm, 0.0, w.lambda_en)),
        ("both", ob.LossWeights(w.lambda_norm, w.lambda_sep, w.lambda_en)),
    ]
    norm_pairs = []
    if w.lambda_norm > 0:
        n = cfg["finetune"]["norm_n"] or 4 * ft.norm_batch
        norm_pairs = fi.generate_norm_data(params, mconfig, schedule, vocab,
                                           seen, n, cfg["finetune"]["norm_seed"],
                                           sample_config)
    rows = [{"variant": "base", "report": evaluate(params, "base")}]
    for label, weights in loss_variants:
        fresh = {n_: Tensor(t.data.copy(), requires_grad=True)
                 for n_, t in params.items()}
        from dataclasses import replace
        tuned, _ = fi.compositional_finetune(
            fresh, mconfig, schedule, vocab, pairs, norm_pairs,
            replace(ft, weights=weights), sample_config)
        rows.append({"variant": f"loss:{label}", "report": evaluate(tuned, label)})
    for pattern in ("to_q", "to_q|to_k", "to_k|to_v", "to_k"):
        fresh = {n_: Tensor(t.data.copy(), requires_grad=True)
                 for n_, t in params.items()}
        from dataclasses import replace
        tuned, _ = fi.compositional_finetune(
            fresh, mconfig, schedule, vocab, pairs, norm_pairs,
            replace(ft, selector=pattern), sample_config)
        rows.append({"variant": f"selector:{pattern}",
                     "report": evaluate(tuned, pattern)})
    rp.write_json(out / "ablation.json",
                  [{"variant": r["variant"], **r["report"].to_dict()}
                   for r in rows])
    rp.ablation_table(out / "ablation.csv", out / "ablation.png", rows)
    for r in rows:
        print(f"{r['variant']}: success={r['report'].success_rate:.3f}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "tta-sample": cmd_tta_sample,
    "eval": cmd_eval,
    "attn-dump": cmd_attn_dump,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from . import config as cfg_mod
    try:
        cfg = cfg_mod.load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None:
            cfg["threads"] = args.threads
        out = args.out if args.out is not None else Path(f"out-{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        cfg_mod.echo(cfg, out, args.command)
        HANDLERS[args.command](cfg, out)
        return 0
    except (cfg_mod.ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(json.dumps({"error": {"kind": "user", "message": str(exc)}}),
              file=sys.stderr)
        return 1
    except Exception as exc:  # internal error: still one parsable line
        print(json.dumps({"error": {"kind": "internal",
                                    "message": f"{type(exc).__name__}: {exc}"}}),
              file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

import numpy as np
import pytest

from composelab import diffusion as df
from composelab import finetune as ft
from composelab import model as md
from composelab import objectives as ob
from composelab import scenes as sc
from composelab.autodiff import Tensor


VOCAB = sc.default_vocab(max_tokens=4)
CONFIG = md.ModelConfig(image_size=8, patch_size=2, hidden_dim=16, num_blocks=2,
                        num_heads=2, text_dim=8, max_tokens=4, timesteps=20,
                        vocab_size=VOCAB.size)
SCHEDULE = df.make_schedule(CONFIG.timesteps)
SAMPLE = df.SampleConfig(num_steps=10, guidance_scale=2.0, sampler="ddim")
PAIR = ft.make_pair_schedule([("red-circle", "blue-square")])


_DATASET = sc.make_dataset(VOCAB, sc.BiasConfig(), 6, seed=40, canvas=8)


def fresh_params(seed=11):
    # a couple of real training steps so no weight sits at its zero init
    # (a zero output head would otherwise cut every upstream gradient)
    params = md.init_model(CONFIG, seed=seed)
    tc = df.TrainConfig(steps=2, batch_size=2, lr=1e-3, warmup=1, seed=seed,
                        log_every=10)
    df.train_base(_DATASET, CONFIG, SCHEDULE, VOCAB, tc, params=params)
    return params


def quick_ft(**kw):
    base = dict(steps=5, batch_size=2, latent_source="q_sample", x0_pool=2,
                seed=3, weights=ob.LossWeights(lambda_norm=0.0))
    base.update(kw)
    return ft.FinetuneConfig(**base)


def clone(params):
    return {n: Tensor(t.data.copy(), requires_grad=True) for n, t in params.items()}


# ---------------------------------------------------------------------------
# config validation

def test_config_validation():
    with pytest.raises(ValueError):
        ft.FinetuneConfig(steps=0)
    with pytest.raises(ValueError):
        ft.FinetuneConfig(lr_schedule="cosine", steps=100, warmup=300)
    with pytest.raises(ValueError):
        ft.FinetuneConfig(latent_source="telepathy")
    with pytest.raises(ValueError):
        ft.FinetuneConfig(t_range=(0.9, 0.1))


def test_cosine_lr_shape():
    cfg = ft.FinetuneConfig(steps=1000, lr_schedule="cosine", warmup=300,
                            peak_lr=1e-6)
    assert cfg.lr_at(0) == pytest.approx(1e-6 / 300)
    assert cfg.lr_at(299) == pytest.approx(1e-6)
    assert cfg.lr_at(999) < 1e-8


def test_pair_schedule_guards():
    with pytest.raises(ValueError):
        ft.make_pair_schedule([])
    with pytest.raises(ValueError):
        ft.make_pair_schedule([("red-circle",)])
    with pytest.raises(ValueError):
        ft.make_pair_schedule([("red-circle", "blue-square")],
                              seen=["red-circle"])


# ---------------------------------------------------------------------------
# norm data

def test_generate_norm_data_deterministic():
    params = fresh_params()
    a = ft.generate_norm_data(params, CONFIG, SCHEDULE, VOCAB,
                              ["red-circle", "cyan-circle"], 3, seed=7,
                              sample_config=SAMPLE)
    b = ft.generate_norm_data(params, CONFIG, SCHEDULE, VOCAB,
                              ["red-circle", "cyan-circle"], 3, seed=7,
                              sample_config=SAMPLE)
    assert len(a) == 3
    for (img1, p1), (img2, p2) in zip(a, b):
        assert img1.tobytes() == img2.tobytes()
        assert p1 == p2
        assert len(p1.concept_indices) == 1
    with pytest.raises(ValueError):
        ft.generate_norm_data(params, CONFIG, SCHEDULE, VOCAB, ["red-circle"],
                              0, seed=7, sample_config=SAMPLE)


# ---------------------------------------------------------------------------
# attention at t

def test_attention_at_t_masks():
    params = fresh_params()
    prompt = sc.make_prompt(VOCAB, ["red-circle", "blue-square"])
    ts = df.timestep_sequence(SCHEDULE.T, SAMPLE.num_steps)
    masks = ft.attention_at_t(params, CONFIG, SCHEDULE, VOCAB, prompt,
                              ts[4], seed=5, sample_config=SAMPLE)
    assert masks.k == 2
    for m in masks.masks:
        assert m.shape == (CONFIG.grid, CONFIG.grid)
        assert np.all((m.data >= 0) & (m.data <= 1))
    with pytest.raises(ValueError):
        ft.attention_at_t(params, CONFIG, SCHEDULE, VOCAB, prompt,
                          ts[0] - 1, seed=5, sample_config=SAMPLE)


# ---------------------------------------------------------------------------
# freeze contract

@pytest.mark.parametrize("selector", ["to_k", "to_q", "to_q|to_k", "to_k|to_v"])
def test_freeze_contract(selector):
    # the norm term keeps every selected projection on a nonzero-gradient
    # path (mask losses alone never reach the last block's to_v)
    params = fresh_params()
    norm_pairs = ft.generate_norm_data(params, CONFIG, SCHEDULE, VOCAB,
                                       ["red-circle"], 2, seed=1,
                                       sample_config=SAMPLE)
    before = {n: t.data.copy() for n, t in params.items()}
    sel = md.ParamSelector(selector)
    ft.compositional_finetune(params, CONFIG, SCHEDULE, VOCAB, PAIR, norm_pairs,
                              quick_ft(selector=selector,
                                       weights=ob.LossWeights(lambda_norm=0.5)),
                              SAMPLE)
    changed = {n for n in params
               if params[n].data.tobytes() != before[n].tobytes()}
    expected = {n for n in params if sel.matches(n)}
    assert changed == expected


def test_nonselected_params_never_change_without_norm():
    params = fresh_params()
    before = {n: t.data.copy() for n, t in params.items()}
    sel = md.ParamSelector("to_k")
    ft.compositional_finetune(params, CONFIG, SCHEDULE, VOCAB, PAIR, [],
                              quick_ft(selector="to_k"), SAMPLE)
    for n in params:
        if not sel.matches(n):
            assert params[n].data.tobytes() == before[n].tobytes()


def test_zero_weights_change_nothing():
    params = fresh_params()
    before = {n: t.data.copy() for n, t in params.items()}
    zero = ob.LossWeights(lambda_norm=0.0, lambda_sep=0.0, lambda_en=0.0)
    ft.compositional_finetune(params, CONFIG, SCHEDULE, VOCAB, PAIR, [],
                              quick_ft(weights=zero), SAMPLE)
    assert all(params[n].data.tobytes() == before[n].tobytes() for n in params)


def test_finetune_reproducible():
    runs = []
    for _ in range(2):
        params = fresh_params()
        tuned, log = ft.compositional_finetune(params, CONFIG, SCHEDULE, VOCAB,
                                               PAIR, [], quick_ft(), SAMPLE)
        runs.append((md.checkpoint_digest(tuned), log))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_finetune_trajectory_source():
    params = fresh_params()
    tuned, log = ft.compositional_finetune(
        params, CONFIG, SCHEDULE, VOCAB, PAIR, [],
        quick_ft(latent_source="trajectory", steps=3), SAMPLE)
    assert len(log) == 3
    assert all(np.isfinite(rec["loss_total"]) for rec in log)


def test_finetune_with_norm_term():
    params = fresh_params()
    norm_pairs = ft.generate_norm_data(params, CONFIG, SCHEDULE, VOCAB,
                                       ["red-circle"], 2, seed=1,
                                       sample_config=SAMPLE)
    weights = ob.LossWeights(lambda_norm=0.5)
    tuned, log = ft.compositional_finetune(params, CONFIG, SCHEDULE, VOCAB,
                                           PAIR, norm_pairs,
                                           quick_ft(weights=weights), SAMPLE)
    assert all(rec["loss_norm"] is not None for rec in log)
    with pytest.raises(ValueError):
        ft.compositional_finetune(fresh_params(), CONFIG, SCHEDULE, VOCAB,
                                  PAIR, [], quick_ft(weights=weights), SAMPLE)


def test_ablate_selectors_runs_each_variant():
    params = fresh_params()
    rows = ft.ablate_selectors(params, CONFIG, SCHEDULE, VOCAB, PAIR, [],
                               quick_ft(steps=2), ["to_k", "to_q"], SAMPLE)
    assert [r["selector"] for r in rows] == ["to_k", "to_q"]
    # base tree untouched by the ablation copies
    assert md.checkpoint_digest(params) == md.checkpoint_digest(fresh_params())


# ---------------------------------------------------------------------------
# test-time adaptation

def test_tta_noop_matches_plain_sampling():
    params = fresh_params()
    prompt = sc.make_prompt(VOCAB, ["red-circle", "blue-square"])
    table = params["text_embed.table"].data
    cond = sc.encode_prompt_np(prompt, table)
    uncond = sc.encode_uncond_np(VOCAB, table)
    plain, _ = df.sample_batch(params, CONFIG, SCHEDULE, cond[None], uncond,
                               SAMPLE, seeds=[9], record=True)
    for tta in (ft.TTAConfig(refine_steps=0),
                ft.TTAConfig(refine_steps=5, step_size=0.0)):
        imgs, log = ft.tta_refine_batch(params, CONFIG, SCHEDULE, VOCAB,
                                        [prompt], SAMPLE, tta, seeds=[9])
        assert imgs[0].tobytes() == plain[0].tobytes()
        assert log == []


def test_tta_never_mutates_params():
    params = fresh_params()
    digest = md.checkpoint_digest(params)
    prompt = sc.make_prompt(VOCAB, ["red-circle", "blue-square"])
    imgs, log = ft.tta_refine_batch(params, CONFIG, SCHEDULE, VOCAB, [prompt],
                                    SAMPLE, ft.TTAConfig(refine_steps=5),
                                    seeds=[4])
    assert md.checkpoint_digest(params) == digest
    assert len(log) == 5
    assert all(p.requires_grad for p in params.values())


def test_tta_actually_moves_latents():
    params = fresh_params()
    prompt = sc.make_prompt(VOCAB, ["red-circle", "blue-square"])
    plain, _ = ft.tta_refine_batch(params, CONFIG, SCHEDULE, VOCAB, [prompt],
                                   SAMPLE, ft.TTAConfig(refine_steps=0),
                                   seeds=[4])
    refined, _ = ft.tta_refine_batch(params, CONFIG, SCHEDULE, VOCAB, [prompt],
                                     SAMPLE, ft.TTAConfig(refine_steps=5),
                                     seeds=[4])
    assert plain.tobytes() != refined.tobytes()


def test_tta_refine_steps_bound():
    params = fresh_params()
    prompt = sc.make_prompt(VOCAB, ["red-circle", "blue-square"])
    with pytest.raises(ValueError):
        ft.tta_refine_batch(params, CONFIG, SCHEDULE, VOCAB, [prompt], SAMPLE,
                            ft.TTAConfig(refine_steps=SAMPLE.num_steps + 1),
                            seeds=[1])

import json
from pathlib import Path

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_inversion.checkpoint import file_hash, load_checkpoint, parameter_hash, save_checkpoint
from concept_inversion.conditioning import (
    NULL_TOKEN, TokenEmbeddingTable, add_placeholder, base_vocabulary, class_token, encode_prompt, load_embedding,
    prompt_for, save_embedding, token_label,
)
from concept_inversion.config import ConfigError, derive_seed, dump_config, load_config, parse_config
from concept_inversion.data import LabeledImages, make_splits
from concept_inversion.denoiser import predict_noise
from concept_inversion.diffusion import TrainConfig, conditional_gap, init_table, train_denoiser
from concept_inversion.evaluation import EvalReport
from concept_inversion.pipeline import Experiment
from concept_inversion.schedule import make_schedule


# ---- conditioning ----

def test_vocabulary_and_tokens():
    vocab = base_vocabulary()
    assert vocab[0] == NULL_TOKEN and len(vocab) == 14
    assert token_label(class_token(7)) == 7 and token_label("photo") is None
    assert prompt_for("<digit-2>") == ["a", "photo", "of", "<digit-2>"]


def test_encode_prompt(tiny_model):
    model, _ = tiny_model
    c = encode_prompt(prompt_for("<digit-4>"), model.table)
    assert c.shape == (4, model.table.dim)
    assert torch.equal(c[3], model.table.row("<digit-4>"))
    with pytest.raises(KeyError):
        encode_prompt(["<digit-11>"], model.table)
    with pytest.raises(ValueError):
        encode_prompt([], model.table)
    with pytest.raises(TypeError):
        encode_prompt("a", model.table)


def test_placeholder_rows(tiny_model):
    table = tiny_model[0].table.copy()
    add_placeholder(table, "<*0>", seed=3)
    add_placeholder(table, "<*1>", ("copy_of", "<digit-7>"))
    add_placeholder(table, "<*2>", "copy_of:<digit-1>")
    assert table.trainable == {"<*0>", "<*1>", "<*2>"}
    assert torch.equal(table.row("<*1>").detach(), table.row("<digit-7>"))
    assert not table.row("<digit-7>").requires_grad
    assert 0.0 < table.row("<*0>").detach().std().item() < 1.0
    with pytest.raises(ValueError):
        add_placeholder(table, "<*0>")
    with pytest.raises(ValueError):
        add_placeholder(table, "plain")
    with pytest.raises(KeyError):
        add_placeholder(table, "<*3>", "copy_of:<digit-99>")
    assert table.fingerprint() == tiny_model[0].table.fingerprint()


def test_set_row_shape_check():
    table = TokenEmbeddingTable.from_matrix(["x"], torch.zeros(1, 3))
    with pytest.raises(ValueError):
        table.set_row("x", torch.zeros(4))
    with pytest.raises(KeyError):
        table.set_row("y", torch.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=16))
def test_embedding_export_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("emb") / "e.json"
    vec = torch.tensor(values, dtype=torch.float32)
    save_embedding(path, "<*0>", vec)
    tok, back = load_embedding(path)
    assert tok == "<*0>" and torch.equal(back, vec)


def test_embedding_file_dim_mismatch(tmp_path):
    path = tmp_path / "e.json"
    path.write_text(json.dumps({"token": "<*0>", "dim": 3, "dtype": "float32", "values": [1.0, 2.0]}))
    with pytest.raises(ValueError):
        load_embedding(path)


# ---- denoiser ----

def test_predict_noise_shape_and_determinism(tiny_model):
    model, sched = tiny_model
    x = torch.randn(5, 1, 8, 8)
    c = encode_prompt(prompt_for("<digit-3>"), model.table)
    a = predict_noise(model, x, c, 3, sched)
    assert a.shape == x.shape
    assert torch.equal(a, predict_noise(model, x, c, torch.full((5,), 3), sched))
    batched = predict_noise(model, x, c.expand(5, -1, -1), 3, sched)
    assert torch.allclose(a, batched)


def test_predict_noise_errors(tiny_model):
    model, sched = tiny_model
    c = encode_prompt(prompt_for("<digit-3>"), model.table)
    with pytest.raises(ValueError):
        predict_noise(model, torch.randn(2, 1, 9, 9), c, 1)
    with pytest.raises(ValueError):
        predict_noise(model, torch.randn(2, 1, 8, 8), torch.zeros(4, 7), 1)
    with pytest.raises(ValueError):
        predict_noise(model, torch.randn(2, 1, 8, 8), c, sched.T + 1, sched)
    with pytest.raises(ValueError):
        predict_noise(model, torch.randn(2, 1, 8, 8), c, 0)


def test_attention_maps_are_distributions(tiny_model):
    model, _ = tiny_model
    c = encode_prompt(prompt_for("<digit-3>"), model.table)
    _, maps = predict_noise(model, torch.randn(2, 1, 8, 8), c, 2, return_attn=True)
    assert len(maps) == len(model.cross_attention_modules())
    for a in maps:
        assert a.shape[-1] == 4 and torch.allclose(a.sum(-1), torch.ones(()))


# ---- training ----

def _toy_data(n=16, size=8):
    g = torch.Generator().manual_seed(0)
    labels = torch.arange(n) % 2
    images = torch.rand(n, 1, size, size, generator=g) * 0.2 - 0.1 + labels[:, None, None, None] * 0.8 - 0.4
    return LabeledImages(images, labels)


def _train(tiny_arch, **kw):
    table = init_table(base_vocabulary(), tiny_arch.embed_dim, 0)
    cfg = TrainConfig(**{"epochs": 3, "batch_size": 8, "lr": 5e-3, **kw})
    return train_denoiser(_toy_data(), table, cfg, make_schedule(8, "linear", 0.05, 0.3), tiny_arch)


def test_training_is_seeded_and_decreases_loss(tiny_arch):
    a = _train(tiny_arch, epochs=6)
    b = _train(tiny_arch, epochs=6)
    assert parameter_hash(a) == parameter_hash(b)
    assert a.table.fingerprint() == b.table.fingerprint()
    assert a.train_curve[-1] < a.train_curve[0]
    assert not any(p.requires_grad for p in a.parameters())


def test_always_dropped_condition_gives_prompt_independent_model(tiny_arch):
    model = _train(tiny_arch, p_uncond=1.0, zero_init_conditioning=True)
    x = torch.randn(3, 1, 8, 8)
    for tok in ("<digit-0>", "<digit-1>"):
        assert conditional_gap(model, x, tok, 4).abs().max().item() == 0.0


def test_training_errors(tiny_arch):
    table = init_table(base_vocabulary(), tiny_arch.embed_dim, 0)
    sched = make_schedule(8)
    with pytest.raises(ValueError):
        train_denoiser(LabeledImages(torch.zeros(0, 1, 8, 8), torch.zeros(0, dtype=torch.long)), table,
                       TrainConfig(epochs=1), sched, tiny_arch)
    with pytest.raises(KeyError):
        train_denoiser(LabeledImages(torch.zeros(2, 1, 8, 8), torch.tensor([0, 12])), table,
                       TrainConfig(epochs=1), sched, tiny_arch)


def test_splits_are_disjoint_and_exclude_classes():
    data = LabeledImages(torch.zeros(60, 1, 2, 2), torch.arange(60) % 3)
    data.images[:, 0, 0, 0] = torch.arange(60).float()
    s = make_splits(data, n_attack=3, n_test=2, seed=1)
    ids = [set(part.images[:, 0, 0, 0].tolist()) for part in (s.train, s.attack, s.test)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert len(s.attack) == 9 and len(s.test) == 6 and len(s.train) == 45
    assert 1 not in s.train.without_class(1).classes


# ---- checkpoints ----

def test_checkpoint_round_trip_is_byte_exact(tmp_path, tiny_model):
    model, sched = tiny_model
    p1 = save_checkpoint(tmp_path / "a.ckpt", model, sched, seed=4, train_config={"epochs": 1})
    back, sched2, meta = load_checkpoint(p1)
    assert parameter_hash(back) == parameter_hash(model)
    assert back.table.fingerprint() == model.table.fingerprint()
    assert sched2.to_dict() == sched.to_dict() and meta["seed"] == 4
    p2 = save_checkpoint(tmp_path / "b.ckpt", back, sched2, seed=4, train_config={"epochs": 1})
    assert file_hash(p1) == file_hash(p2)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.ckpt"):
        load_checkpoint(tmp_path / "missing.ckpt")


# ---- config ----

def test_config_defaults_and_round_trip(tmp_path):
    cfg = parse_config({})
    path = dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(path) == cfg and load_config(path).digest() == cfg.digest()


def test_shipped_configs_load():
    configs = Path(__file__).resolve().parents[1] / "configs"
    assert load_config(configs / "default.yaml") == parse_config({})
    assert load_config(configs / "smoke.yaml").diffusion.schedule.T == 10


def test_stage_dirs_follow_config_not_workdir_contents(tmp_path):
    (tmp_path / "erase-esd-digit-3-000stale000").mkdir()
    a = Experiment(parse_config({}), tmp_path)._dir("erase-esd-digit-3", {"variant": "u"})
    e = Experiment(parse_config({}), tmp_path)
    b = e._dir("erase-esd-digit-3", {"variant": "u"})
    assert a == b == e.stage_dirs["erase-esd-digit-3"]
    assert e._dir("erase-esd-digit-3", {"variant": "x"}) != b


def test_config_unknown_key_is_named():
    with pytest.raises(ConfigError, match="erasure.esd.etaa"):
        parse_config({"erasure": {"esd": {"etaa": 1.0}}})
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({"bogus": 1})


def test_config_bad_value_is_named():
    with pytest.raises(ConfigError, match="diffusion.schedule.T"):
        parse_config({"diffusion": {"schedule": {"T": 0}}})


def test_derive_seed_is_stable_and_stage_specific():
    assert derive_seed(0, "train") == derive_seed(0, "train")
    assert derive_seed(0, "train") != derive_seed(0, "erase") != derive_seed(1, "erase")
    assert 0 <= derive_seed(123, "x") < 2 ** 31


# ---- report ----

def test_report_round_trip_and_validation(tmp_path):
    rep = EvalReport(config={"seed": 0})
    rep.add(concept="<digit-3>", method="base", stage="base", accuracy=0.9, n=10, seed=1)
    rep.add(concept="<digit-3>", method="esd", stage="erased", accuracy=0.05, n=10, seed=1)
    rep.add(concept="<digit-3>", method="esd", stage="ci", accuracy=0.6, n=10, seed=1)
    assert not rep.is_complete()
    rep.add(concept="<digit-3>", method="esd", stage="transfer", accuracy=None, n=0, seed=1, skip_reason="not run")
    assert rep.is_complete()
    back = EvalReport.load(rep.save(tmp_path / "r.json"))
    assert back.to_json() == rep.to_json()
    assert "5.0 / 60.0" in back.to_markdown()
    with pytest.raises(ValueError):
        rep.add(concept="c", method="m", stage="ci", accuracy=1.5, n=1, seed=0)

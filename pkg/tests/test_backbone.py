import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentflow import backbone as bb
from latentflow.errors import ConfigError

SMALL = bb.BackboneSpec(d_embed=32, n_layers=2, n_heads=2, context_length=64)


@pytest.fixture(scope="module")
def handle():
    return bb.load_or_init_backbone(bb.BackboneSpec())


@pytest.fixture(scope="module")
def small():
    return bb.load_or_init_backbone(SMALL)


def test_causality_default_backbone(handle):
    rng = np.random.default_rng(0)
    e = rng.standard_normal((256, 12))
    base = bb.forward_embeddings(handle, e)
    for t in (3, 7, 11):
        pert = e.copy()
        pert[:, t] += rng.standard_normal(256) * 5
        out = bb.forward_embeddings(handle, pert)
        assert np.abs(out[:, :t] - base[:, :t]).max() < 1e-6
        assert np.abs(out[:, t] - base[:, t]).max() > 1e-3


def test_forward_deterministic(small):
    e = np.random.default_rng(1).standard_normal((32, 5))
    np.testing.assert_array_equal(bb.forward_embeddings(small, e), bb.forward_embeddings(small, e))


def test_forward_rejects_bad_shapes(small):
    with pytest.raises(ConfigError):
        bb.forward_embeddings(small, np.zeros((31, 4)))
    with pytest.raises(ConfigError):
        bb.forward_embeddings(small, np.zeros((32, 65)))
    with pytest.raises(ConfigError):
        bb.forward_embeddings(small, np.zeros((32, 0)))


def test_same_seed_same_weights():
    a = bb.load_or_init_backbone(SMALL)
    b = bb.load_or_init_backbone(SMALL)
    assert a.base_checksum() == b.base_checksum()
    c = bb.load_or_init_backbone(bb.BackboneSpec(**{**SMALL.to_dict(), "seed": 1}))
    assert a.base_checksum() != c.base_checksum()


def test_base_is_frozen(small):
    assert all(not p.requires_grad for p in small.model.parameters())


def test_prompt_embeddings_shape_and_determinism(handle):
    texts = ["a patch", "another, longer patch description", "x"]
    a = bb.embed_text_last_token(handle, texts)
    assert a.shape == (256, 3)
    np.testing.assert_array_equal(a, bb.embed_text_last_token(handle, texts))


def test_left_padding_invariance(handle):
    short = "short prompt"
    longer = "a much longer prompt that forces several pad tokens onto the short one"
    alone = bb.embed_text_last_token(handle, [short])[:, 0]
    batched = bb.embed_text_last_token(handle, [longer, short])[:, 1]
    assert np.abs(alone - batched).max() < 1e-5


def test_left_padding_layout(small):
    ids, mask = bb.tokenize_left_padded(small, ["ab", "abcd"])
    tok = small.tokenizer
    assert ids[0].tolist() == [tok.pad_id, tok.pad_id, 97, 98, tok.eos_id]
    assert mask[0].tolist() == [0, 0, 1, 1, 1]
    assert ids[1, -1].item() == tok.eos_id


def test_prompt_errors(small):
    with pytest.raises(ConfigError):
        bb.embed_text_last_token(small, [])
    with pytest.raises(ConfigError):
        bb.embed_text_last_token(small, [""])
    with pytest.raises(ConfigError):
        bb.embed_text_last_token(small, ["x" * 100])


def test_zero_lora_is_bit_identical(handle):
    e = np.random.default_rng(2).standard_normal((256, 9))
    tuned = bb.attach_lora(handle, bb.LoraAdapter(rank=4, alpha=16))
    assert len(tuned.lora_parameters()) == 2 * handle.spec.n_layers
    np.testing.assert_array_equal(bb.forward_embeddings(tuned, e), bb.forward_embeddings(handle, e))
    assert tuned.base_checksum() == handle.base_checksum()


def test_lora_scale_and_update(small):
    adapter = bb.LoraAdapter(rank=4, alpha=16)
    assert adapter.scale == 4.0
    tuned = bb.attach_lora(small, adapter)
    layer = tuned.model.blocks[0].attn.q_proj
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(3, 32)
    expected = layer.base(x) + 4.0 * x @ layer.lora_A.T @ layer.lora_B.T
    torch.testing.assert_close(layer(x), expected)
    # original handle untouched, base weights unchanged
    assert not any("lora_" in k for k in small.model.state_dict())
    assert tuned.base_checksum() == small.base_checksum()


def test_lora_adapter_dimension_check(small):
    with pytest.raises(ConfigError):
        bb.attach_lora(small, bb.LoraAdapter(d_embed=64))
    with pytest.raises(ConfigError):
        bb.attach_lora(small, bb.LoraAdapter(target="nonexistent"))


def test_lora_only_trainable(small):
    tuned = bb.attach_lora(small, bb.LoraAdapter())
    names = [n for n, p in tuned.model.named_parameters() if p.requires_grad]
    assert names and all("lora_" in n for n in names)


def test_save_and_reload(tmp_path, small):
    bb.save_backbone(small, tmp_path)
    back = bb.load_or_init_backbone(bb.BackboneSpec(**{**SMALL.to_dict(), "seed": 99, "checkpoint": str(tmp_path)}))
    assert back.base_checksum() == small.base_checksum()
    with pytest.raises(ConfigError):
        bb.load_or_init_backbone(bb.BackboneSpec(d_embed=64, n_heads=2, n_layers=2, checkpoint=str(tmp_path)))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 20), st.integers(0, 10**6))
def test_causal_prefix_consistency(L, seed):
    h = bb.load_or_init_backbone(SMALL)
    e = np.random.default_rng(seed).standard_normal((32, L))
    full = bb.forward_embeddings(h, e)
    k = max(1, L // 2)
    np.testing.assert_allclose(bb.forward_embeddings(h, e[:, :k]), full[:, :k], atol=1e-5)

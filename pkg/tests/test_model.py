import pytest
import torch

from dail.checkpoint import load_checkpoint, save_checkpoint
from dail.model import (
    ContextOverflowError,
    Decoder,
    ModelConfig,
    ModelError,
    TokenRangeError,
    forward,
    forward_logits,
    init_adapter,
    init_params,
    merged_weights,
)
from dail.vocab import SPECIALS, VocabularyError

from conftest import perturbed_adapter


def test_vocab_specials_distinct_and_dense(vocab):
    ids = [vocab.id(s) for s in SPECIALS]
    assert len(set(ids)) == len(ids)
    assert sorted(vocab.id(s) for s in vocab.symbols) == list(range(len(vocab)))


def test_vocab_round_trip_every_id(vocab):
    for i in range(len(vocab)):
        assert vocab.encode(vocab.decode([i])) == [i]
    text = "417+5=422;-3=419;</think>\\boxed{419}"
    assert vocab.decode(vocab.encode(text)) == text


def test_vocab_rejects_unknown_character(vocab):
    with pytest.raises(VocabularyError):
        vocab.encode("é")


def test_init_params_deterministic(tiny_config):
    a = init_params(tiny_config, 5)
    b = init_params(tiny_config, 5)
    assert all(torch.equal(a[k], b[k]) for k in a.tensors)
    c = init_params(tiny_config, 6)
    assert any(not torch.equal(a[k], c[k]) for k in a.tensors)


def test_reference_architecture_shapes():
    cfg = ModelConfig(100, embed_dim=64, layers=2, heads=2, context_len=512)
    params = init_params(cfg, 0)
    expected = {"tok_emb": (100, 64), "pos_emb": (512, 64), "lnf_g": (64,), "lnf_b": (64,), "head": (100, 64)}
    for i in range(2):
        for w in ("wq", "wk", "wv", "wo"):
            expected[f"l{i}.{w}"] = (64, 64)
        expected.update({f"l{i}.w1": (256, 64), f"l{i}.b1": (256,), f"l{i}.w2": (64, 256), f"l{i}.b2": (64,)})
        for n in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            expected[f"l{i}.{n}"] = (64,)
    assert {k: tuple(v.shape) for k, v in params.tensors.items()} == expected
    assert all(torch.isfinite(v).all() for v in params.tensors.values())


@pytest.mark.parametrize("kw", [dict(embed_dim=10, heads=3), dict(layers=0), dict(precision="half"),
                                dict(positional="alibi")])
def test_invalid_config(kw):
    with pytest.raises(ModelError):
        ModelConfig(50, **kw)


def test_zero_b_adapter_is_exact_noop(tiny_params, vocab):
    ad = init_adapter(tiny_params, seed=1)
    assert ad.is_zero()
    ctx = [vocab.bos] + vocab.encode("12+3")
    assert torch.equal(forward_logits(tiny_params, ad, ctx), forward_logits(tiny_params, None, ctx))


def test_bos_only_context(tiny_params, vocab):
    out = forward_logits(tiny_params, None, [vocab.bos])
    assert out.shape == (len(vocab),) and torch.isfinite(out).all()


def test_context_errors(tiny_params, vocab):
    with pytest.raises(ContextOverflowError):
        forward_logits(tiny_params, None, [vocab.bos] * (tiny_params.config.context_len + 1))
    with pytest.raises(TokenRangeError):
        forward_logits(tiny_params, None, [len(vocab)])


def test_softmax_sums_to_one(tiny_params, tiny_check_params, vocab):
    ctx = [vocab.bos] + vocab.encode("9-4+1")
    p = torch.softmax(forward_logits(tiny_params, None, ctx), -1)
    assert abs(float(p.sum()) - 1) < 1e-6
    p = torch.softmax(forward_logits(tiny_check_params, None, ctx), -1)
    assert abs(float(p.sum()) - 1) < 1e-12


def test_adapter_linearity(tiny_params):
    ad = perturbed_adapter(tiny_params)
    name = next(iter(ad.factors))
    assert torch.equal(ad.with_alpha(2 * ad.alpha).delta(name), 2 * ad.delta(name))


def test_causal_masking(tiny_params, vocab):
    a = torch.tensor([[vocab.bos] + vocab.encode("123+4=5")])
    b = a.clone()
    b[0, 5:] = torch.tensor(vocab.encode("9-1"))
    la, lb = forward(tiny_params, None, a), forward(tiny_params, None, b)
    assert torch.equal(la[0, :5], lb[0, :5])
    assert not torch.equal(la[0, 5:], lb[0, 5:])


@pytest.mark.parametrize("positional", ["learned", "rotary", "both"])
def test_incremental_decoder_matches_forward(vocab, positional):
    cfg = ModelConfig(len(vocab), embed_dim=16, layers=2, heads=2, positional=positional)
    params = init_params(cfg, 1)
    ad = perturbed_adapter(params)
    seq = [vocab.bos] + vocab.encode("417+5=422;")
    full = forward(params, ad, torch.tensor([seq]))[0]
    dec = Decoder(params, ad)
    last = dec.prefill(torch.tensor([seq[:4]]))
    assert torch.allclose(last[0], full[3], atol=1e-5)
    for t in range(4, len(seq)):
        last = dec.step(torch.tensor([seq[t]]))
        assert torch.allclose(last[0], full[t], atol=1e-5)


def test_merged_weights_equal_adapter_forward(tiny_params, vocab):
    ad = perturbed_adapter(tiny_params)
    merged = merged_weights(tiny_params, ad)
    mp = type(tiny_params)(tiny_params.config, tiny_params.seed, merged)
    ctx = [vocab.bos] + vocab.encode("5+5")
    assert torch.allclose(forward_logits(mp, None, ctx), forward_logits(tiny_params, ad, ctx), atol=1e-5)


def test_checkpoint_round_trip(tmp_path, tiny_params):
    ad = perturbed_adapter(tiny_params)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_params, ad)
    params, adapter = load_checkpoint(path)
    assert params.config == tiny_params.config
    assert params.fingerprint() == tiny_params.fingerprint()
    for (k, (a, b)), (k2, (a2, b2)) in zip(sorted(ad.factors.items()), sorted(adapter.factors.items())):
        assert k == k2 and torch.equal(a, a2) and torch.equal(b, b2)
    assert adapter.alpha == ad.alpha and adapter.rank == ad.rank

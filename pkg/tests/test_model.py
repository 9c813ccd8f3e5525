import numpy as np
import pytest

from revdesign import dataset as ds, model as mdl
from revdesign.errors import CheckpointError, ShapeError, VocabMismatchError
from revdesign.imgedit import synth_image
from revdesign.prompting import BREAK, assemble_prompt, build_vocab, register_special_tokens


@pytest.fixture(scope="module")
def vocab():
    return build_vocab()


@pytest.fixture(scope="module")
def cfg(vocab):
    return mdl.ModelConfig(vocab_size=len(vocab), seed=11)


@pytest.fixture(scope="module")
def params(cfg):
    return mdl.init_params(cfg)


def test_encode_image_shape_and_determinism(params, cfg):
    img = synth_image(1)
    a = mdl.encode_image(img, params, cfg)
    b = mdl.encode_image(img, params, cfg)
    assert a.shape == (16, 64)
    assert np.array_equal(a, b)


def test_encode_image_distinguishes_images(params, cfg):
    a = mdl.encode_image(synth_image(1), params, cfg)
    b = mdl.encode_image(synth_image(2), params, cfg)
    assert not np.array_equal(a, b)


def test_encode_image_shared_weights_across_slots(params, cfg):
    # same image through the (single) encoder gives identical tokens; the
    # batch dimension carries both slots through the same weights
    img = synth_image(3)
    both, _ = mdl.vision_fwd(mdl.to_f64(params), cfg, np.stack([img, img]))
    assert np.array_equal(both[0], both[1])


def test_encode_image_rejects_bad_shape(params, cfg):
    with pytest.raises(ShapeError):
        mdl.vision_fwd(mdl.to_f64(params), cfg, np.zeros((1, 16, 16, 3)))


def test_project_affine(params, cfg):
    tokens = mdl.encode_image(synth_image(4), params, cfg)
    zero = {"proj.w": np.zeros((64, 128)), "proj.b": np.full(128, 0.25)}
    out = mdl.project(tokens, zero)
    assert out.shape == (16, 128)
    assert np.allclose(out, 0.25)
    # affinity: f(a*x) - f(0) = a * (f(x) - f(0))
    f = lambda t: mdl.project(t, params)
    lhs = f(3.0 * tokens) - f(np.zeros_like(tokens))
    rhs = 3.0 * (f(tokens) - f(np.zeros_like(tokens)))
    assert np.allclose(lhs, rhs, atol=1e-9)


def _probe(vocab, cfg):
    return mdl.probe_batch(vocab, cfg)


def test_forward_shapes(params, cfg, vocab):
    batch = _probe(vocab, cfg)
    logits, _ = mdl.forward(params, cfg, batch)
    assert logits.shape == (2, batch.ids.shape[1], len(vocab))


def test_forward_causality_bitwise(params, cfg, vocab):
    batch = _probe(vocab, cfg)
    logits, _ = mdl.forward(params, cfg, batch)
    t = 20
    ids2 = batch.ids.copy()
    ids2[:, t + 1 :] = vocab.pad_id  # clobber everything after t
    batch2 = mdl.Batch(ids2, batch.mask, batch.lengths, batch.slot_pos,
                       batch.images, batch.samples)
    logits2, _ = mdl.forward(params, cfg, batch2)
    assert np.array_equal(logits[:, : t + 1], logits2[:, : t + 1])


def test_forward_sensitive_to_image_swap(params, cfg, vocab):
    batch = _probe(vocab, cfg)
    swapped = mdl.Batch(batch.ids, batch.mask, batch.lengths, batch.slot_pos,
                        batch.images[:, ::-1], batch.samples)
    a, _ = mdl.forward(params, cfg, batch)
    b, _ = mdl.forward(params, cfg, swapped)
    assert not np.array_equal(a, b)


def test_forward_rejects_overlong(params, cfg, vocab):
    ids = np.full((1, cfg.max_seq + 4), vocab.pad_id, dtype=np.int64)
    with pytest.raises(ShapeError):
        mdl.lm_fwd(mdl.to_f64(params), cfg, ids, np.zeros((1, 2), dtype=np.int64),
                   np.zeros((1, 2, cfg.k_img, cfg.d_lm)))


def _prompt_sample(vocab, cfg):
    text = "[IMG1] [IMG2] What edits transform the first image into the second?"
    return assemble_prompt(vocab, vocab.tokenize(text), cfg.k_img)


def test_greedy_decode_rigged_eos(params, cfg, vocab):
    rigged = dict(params)
    rigged["lm.head.b"] = params["lm.head.b"].copy()
    rigged["lm.head.b"][vocab.eos_id] = 1e4
    out, trunc = mdl.greedy_decode(rigged, cfg, vocab, _prompt_sample(vocab, cfg),
                                   np.stack([synth_image(1), synth_image(2)]))
    assert out == []
    assert trunc is False


def test_greedy_decode_deterministic(params, cfg, vocab):
    images = np.stack([synth_image(1), synth_image(2)])
    a = mdl.greedy_decode(params, cfg, vocab, _prompt_sample(vocab, cfg), images, max_new=8)
    b = mdl.greedy_decode(params, cfg, vocab, _prompt_sample(vocab, cfg), images, max_new=8)
    assert a == b


def test_greedy_decode_truncation_flag(params, cfg, vocab):
    rigged = dict(params)
    rigged["lm.head.b"] = params["lm.head.b"].copy()
    rigged["lm.head.b"][vocab.id("hue")] = 1e4  # never emits <eos>
    out, trunc = mdl.greedy_decode(rigged, cfg, vocab, _prompt_sample(vocab, cfg),
                                   np.stack([synth_image(1), synth_image(2)]), max_new=5)
    assert len(out) == 5
    assert trunc is True


def test_batch_decode_matches_single(params, cfg, vocab):
    samples = [_prompt_sample(vocab, cfg) for _ in range(3)]
    images = [np.stack([synth_image(i), synth_image(i + 50)]) for i in range(3)]
    batch_out, _ = mdl.greedy_decode_batch(params, cfg, vocab, samples, np.stack(images),
                                           max_new=12)
    for i in range(3):
        single, _ = mdl.greedy_decode(params, cfg, vocab, samples[i], images[i], max_new=12)
        assert single == batch_out[i]


def test_init_special_embedding(params, cfg, vocab):
    v2 = register_special_tokens(vocab, [BREAK])
    grown = mdl.expand_vocab(params, cfg, len(v2))
    assert grown["lm.tok"].shape[0] == len(v2)
    old_ids = v2.init_descriptors[BREAK]
    assert len(old_ids) == 3  # '<', 'break', '>'
    done = mdl.init_special_embedding(grown, v2, BREAK, old_ids)
    tid = v2.id(BREAK)
    assert np.allclose(done["lm.tok"][tid], grown["lm.tok"][old_ids].mean(axis=0))
    assert np.allclose(done["lm.head.w"][:, tid], grown["lm.head.w"][:, old_ids].mean(axis=1))
    # single-id descriptor copies the row exactly
    one = mdl.init_special_embedding(grown, v2, BREAK, [5])
    assert np.array_equal(one["lm.tok"][tid], grown["lm.tok"][5])
    # two-id descriptor is the componentwise mean
    two = mdl.init_special_embedding(grown, v2, BREAK, [5, 9])
    assert np.allclose(two["lm.tok"][tid], (grown["lm.tok"][5] + grown["lm.tok"][9]) / 2.0)
    with pytest.raises(ValueError):
        mdl.init_special_embedding(grown, v2, BREAK, [])


def test_checkpoint_round_trip(params, cfg, vocab, tmp_path):
    batch = _probe(vocab, cfg)
    before, _ = mdl.forward(params, cfg, batch)
    path = tmp_path / "ckpt.bin"
    mdl.save_checkpoint(params, cfg, vocab, str(path), step=77,
                        val_metrics={"accuracy": 0.5}, extra={"experiment": "1"})
    loaded, meta = mdl.load_checkpoint(str(path))
    after, _ = mdl.forward(loaded, meta["config"], batch)
    assert np.array_equal(before, after)
    assert meta["step"] == 77
    assert meta["config"] == cfg
    assert meta["vocab"].fingerprint == vocab.fingerprint
    assert meta["val_metrics"]["accuracy"] == 0.5


def test_checkpoint_fingerprint_mismatch(params, cfg, vocab, tmp_path):
    path = tmp_path / "ckpt.bin"
    mdl.save_checkpoint(params, cfg, vocab, str(path))
    other = register_special_tokens(vocab, [BREAK])
    with pytest.raises(VocabMismatchError):
        mdl.load_checkpoint(str(path), expect_fingerprint=other.fingerprint)
    mdl.load_checkpoint(str(path), expect_fingerprint=vocab.fingerprint)


def test_checkpoint_truncation_and_magic(params, cfg, vocab, tmp_path):
    path = tmp_path / "ckpt.bin"
    mdl.save_checkpoint(params, cfg, vocab, str(path))
    blob = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(blob[: len(blob) - 1000])
    with pytest.raises(CheckpointError, match="truncated"):
        mdl.load_checkpoint(str(tmp_path / "trunc.bin"))
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        mdl.load_checkpoint(str(tmp_path / "magic.bin"))


def test_frozen_groups_config(cfg):
    assert mdl.frozen_groups(cfg) == {"vision", "lm"}
    open_cfg = mdl.ModelConfig(vocab_size=8, freeze_vision=False, freeze_lm=False)
    assert mdl.frozen_groups(open_cfg) == set()


def test_param_groups_cover_everything(params):
    assert {mdl.param_group(n) for n in params} == {"vision", "proj", "lm"}

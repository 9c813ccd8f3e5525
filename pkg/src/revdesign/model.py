"""Two-image vision-language model at desk scale.

A shared patch-transformer vision encoder maps each 32x32 image to K tokens;
one trainable affine projection lifts them into the LM embedding space; a
small causal decoder predicts the answer sentence. Forward and backward
passes are hand-written (see nn.py); parameters live in a flat name->array
dict of float32 master copies, while all math runs in float64 upcasts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import CheckpointError, ConfigError, ShapeError, VocabMismatchError
from .imgedit import IMG_SIZE, stable_hash, synth_image
from .prompting import EncodedSample, TokenVocab, assemble

MAGIC = b"RDL1"


@dataclass(frozen=True)
class ModelConfig:
    d_vision: int = 64
    d_lm: int = 128
    lm_layers: int = 4
    lm_heads: int = 4
    vis_layers: int = 2
    vis_heads: int = 4
    patch: int = 4
    k_img: int = 16
    max_seq: int = 128
    vocab_size: int = 0
    freeze_vision: bool = True
    freeze_lm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_lm % self.lm_heads or self.d_vision % self.vis_heads:
            raise ConfigError("model width must be divisible by head count")
        if IMG_SIZE % self.patch:
            raise ConfigError("patch size must divide the image size")

    @property
    def n_patches(self) -> int:
        side = IMG_SIZE // self.patch
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


def param_group(name: str) -> str:
    """'vision', 'proj', or 'lm' -- the three freeze/train units."""
    return {"vis": "vision", "proj": "proj", "lm": "lm"}[name.split(".", 1)[0]]


def frozen_groups(config: ModelConfig) -> set[str]:
    out = set()
    if config.freeze_vision:
        out.add("vision")
    if config.freeze_lm:
        out.add("lm")
    return out


def trainable_names(params: dict, config: ModelConfig) -> list[str]:
    frozen = frozen_groups(config)
    return [n for n in sorted(params) if param_group(n) not in frozen]


def _block_params(rng, prefix: str, d: int, out: dict) -> None:
    for nm in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.attn.{nm}"] = rng.normal(0.0, 0.02, (d, d))
    for nm in ("bq", "bk", "bv", "bo"):
        out[f"{prefix}.attn.{nm}"] = np.zeros(d)
    out[f"{prefix}.ln1.g"] = np.ones(d)
    out[f"{prefix}.ln1.b"] = np.zeros(d)
    out[f"{prefix}.ln2.g"] = np.ones(d)
    out[f"{prefix}.ln2.b"] = np.zeros(d)
    out[f"{prefix}.mlp.w1"] = rng.normal(0.0, 0.02, (d, 4 * d))
    out[f"{prefix}.mlp.b1"] = np.zeros(4 * d)
    out[f"{prefix}.mlp.w2"] = rng.normal(0.0, 0.02, (4 * d, d))
    out[f"{prefix}.mlp.b2"] = np.zeros(d)


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Fresh float32 parameter dict, deterministic in config.seed."""
    if config.vocab_size <= 0:
        raise ConfigError("vocab_size must be set before initializing parameters")
    rng = np.random.Generator(np.random.PCG64(stable_hash(config.seed, "init")))
    p: dict[str, np.ndarray] = {}
    dv, dl = config.d_vision, config.d_lm
    p["vis.patch.w"] = rng.normal(0.0, 0.02, (config.patch_dim, dv))
    p["vis.patch.b"] = np.zeros(dv)
    p["vis.pos"] = rng.normal(0.0, 0.02, (config.n_patches, dv))
    for i in range(config.vis_layers):
        _block_params(rng, f"vis.b{i}", dv, p)
    # pooling starts near block-averaging of consecutive patch groups
    group = config.n_patches // config.k_img
    pool = np.kron(np.eye(config.k_img), np.ones((1, group)) / group)
    p["vis.pool.w"] = pool + rng.normal(0.0, 0.01, pool.shape)
    p["vis.lnf.g"] = np.ones(dv)
    p["vis.lnf.b"] = np.zeros(dv)
    p["proj.w"] = rng.normal(0.0, 0.02, (dv, dl))
    p["proj.b"] = np.zeros(dl)
    p["lm.tok"] = rng.normal(0.0, 0.02, (config.vocab_size, dl))
    p["lm.pos"] = rng.normal(0.0, 0.02, (config.max_seq, dl))
    for i in range(config.lm_layers):
        _block_params(rng, f"lm.b{i}", dl, p)
    p["lm.lnf.g"] = np.ones(dl)
    p["lm.lnf.b"] = np.zeros(dl)
    p["lm.head.w"] = rng.normal(0.0, 0.02, (dl, config.vocab_size))
    p["lm.head.b"] = np.zeros(config.vocab_size)
    return {k: v.astype(np.float32) for k, v in p.items()}


def to_f64(params: dict) -> dict:
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def zero_grads(params: dict) -> dict:
    return {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}


def apply_freeze(grads: dict, config: ModelConfig) -> None:
    frozen = frozen_groups(config)
    for name in grads:
        if param_group(name) in frozen:
            grads[name][...] = 0.0


# ---------------------------------------------------------------- vision ---


def _to_patches(imgs: np.ndarray, patch: int) -> np.ndarray:
    b = imgs.shape[0]
    side = IMG_SIZE // patch
    x = imgs.reshape(b, side, patch, side, patch, 3)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, side * side, patch * patch * 3)


def vision_fwd(p: dict, config: ModelConfig, imgs: np.ndarray):
    """(B, 32, 32, 3) images -> (B, K, d_vision) tokens."""
    if imgs.shape[1:] != (IMG_SIZE, IMG_SIZE, 3):
        raise ShapeError(f"expected (*, {IMG_SIZE}, {IMG_SIZE}, 3) images, got {imgs.shape}")
    patches = _to_patches(np.asarray(imgs, dtype=np.float64), config.patch)
    x, pc = nn.linear_fwd(patches, p["vis.patch.w"], p["vis.patch.b"])
    x = x + p["vis.pos"]
    caches = []
    for i in range(config.vis_layers):
        x, c = nn.block_fwd(x, p, f"vis.b{i}", config.vis_heads, causal=False)
        caches.append(c)
    pooled = np.matmul(p["vis.pool.w"], x)
    y, lc = nn.layernorm_fwd(pooled, p["vis.lnf.g"], p["vis.lnf.b"])
    return y, (pc, caches, x, lc)


def vision_bwd(dy: np.ndarray, cache, p: dict, config: ModelConfig, grads: dict) -> None:
    pc, caches, x_blocks, lc = cache
    dpooled, dg, db = nn.layernorm_bwd(dy, lc)
    grads["vis.lnf.g"] += dg
    grads["vis.lnf.b"] += db
    grads["vis.pool.w"] += np.tensordot(dpooled, x_blocks, axes=([0, 2], [0, 2]))
    dx = np.matmul(p["vis.pool.w"].T, dpooled)
    for i in reversed(range(config.vis_layers)):
        dx = nn.block_bwd(dx, caches[i], grads, f"vis.b{i}")
    grads["vis.pos"] += dx.sum(axis=0)
    _, dw, db2 = nn.linear_bwd(dx, pc)
    grads["vis.patch.w"] += dw
    grads["vis.patch.b"] += db2


def encode_image(img: np.ndarray, params: dict, config: ModelConfig) -> np.ndarray:
    """Single image -> (K, d_vision) tokens; both sample images share these
    weights, so encoding is identical regardless of slot."""
    tokens, _ = vision_fwd(to_f64(params), config, img[None])
    return tokens[0]


def project(tokens: np.ndarray, params: dict) -> np.ndarray:
    """Affine d_vision -> d_lm map shared across token positions and images."""
    w = np.asarray(params["proj.w"], dtype=np.float64)
    b = np.asarray(params["proj.b"], dtype=np.float64)
    return tokens @ w + b


# ------------------------------------------------------------------ batch ---


@dataclass
class Batch:
    """Right-padded id matrix plus slot geometry for B samples."""

    ids: np.ndarray            # (B, T) int64
    mask: np.ndarray           # (B, T) int8
    lengths: np.ndarray        # (B,)
    slot_pos: np.ndarray       # (B, 2)
    images: np.ndarray         # (B, 2, 32, 32, 3)
    samples: list = field(default_factory=list)


def build_batch(samples: list[EncodedSample], images, config: ModelConfig,
                vocab: TokenVocab, extra_room: int = 0) -> Batch:
    lengths = np.array([len(s) for s in samples], dtype=np.int64)
    t_max = int(lengths.max()) + extra_room
    if t_max > config.max_seq:
        raise ShapeError(f"batch length {t_max} exceeds max_seq {config.max_seq}")
    b = len(samples)
    ids = np.full((b, t_max), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=np.int8)
    slot_pos = np.zeros((b, 2), dtype=np.int64)
    for i, s in enumerate(samples):
        ids[i, : len(s)] = s.token_ids
        mask[i, : len(s)] = s.loss_mask
        if s.image_slots[0][1] != config.k_img:
            raise ShapeError(
                f"sample slot length {s.image_slots[0][1]} != configured K {config.k_img}"
            )
        slot_pos[i] = (s.image_slots[0][0], s.image_slots[1][0])
    return Batch(ids, mask, lengths, slot_pos, np.asarray(images, dtype=np.float64), list(samples))


def lm_fwd(p: dict, config: ModelConfig, ids: np.ndarray, slot_pos: np.ndarray,
           slot_values: np.ndarray):
    """Language-model pass over an id matrix with image-slot embeddings
    substituted in. slot_values is (B, 2, K, d_lm): projected image tokens
    during normal operation, fixed placeholders during LM pretraining."""
    bsz, t = ids.shape
    if t > config.max_seq:
        raise ShapeError(f"sequence length {t} exceeds max_seq {config.max_seq}")
    k = config.k_img
    emb = p["lm.tok"][ids]
    b_idx = np.arange(bsz)[:, None, None]
    s_idx = slot_pos[:, :, None] + np.arange(k)[None, None, :]
    emb[b_idx, s_idx] = slot_values
    x = emb + p["lm.pos"][:t]
    caches = []
    for i in range(config.lm_layers):
        x, c = nn.block_fwd(x, p, f"lm.b{i}", config.lm_heads, causal=True)
        caches.append(c)
    xf, lnfc = nn.layernorm_fwd(x, p["lm.lnf.g"], p["lm.lnf.b"])
    logits, hc = nn.linear_fwd(xf, p["lm.head.w"], p["lm.head.b"])
    return logits, (caches, lnfc, hc, b_idx, s_idx)


def lm_bwd(dlogits: np.ndarray, cache, config: ModelConfig, ids: np.ndarray,
           grads: dict) -> np.ndarray:
    """Backward of lm_fwd; returns the gradient w.r.t. slot_values."""
    caches, lnfc, hc, b_idx, s_idx = cache
    t = ids.shape[1]
    dxf, dwh, dbh = nn.linear_bwd(dlogits, hc)
    grads["lm.head.w"] += dwh
    grads["lm.head.b"] += dbh
    dx, dg, db = nn.layernorm_bwd(dxf, lnfc)
    grads["lm.lnf.g"] += dg
    grads["lm.lnf.b"] += db
    for i in reversed(range(config.lm_layers)):
        dx = nn.block_bwd(dx, caches[i], grads, f"lm.b{i}")
    grads["lm.pos"][:t] += dx.sum(axis=0)
    dslots = dx[b_idx, s_idx]
    slot_mask = np.zeros(ids.shape, dtype=bool)
    slot_mask[b_idx, s_idx] = True
    np.add.at(grads["lm.tok"], ids[~slot_mask], dx[~slot_mask])
    return dslots


def forward(params: dict, config: ModelConfig, batch: Batch, p64: dict | None = None):
    """Teacher-forced forward pass -> (logits (B,T,V), cache).

    Image-slot positions have their token embeddings replaced by the
    projected image tokens (source into the <img1> slot, edited into the
    <img2> slot); positional embeddings apply uniformly afterwards.
    """
    p = p64 if p64 is not None else to_f64(params)
    bsz, t = batch.ids.shape
    k = config.k_img
    vis_tokens, vcache = vision_fwd(p, config, batch.images.reshape(bsz * 2, IMG_SIZE, IMG_SIZE, 3))
    proj_tokens, prc = nn.linear_fwd(vis_tokens, p["proj.w"], p["proj.b"])
    logits, lmc = lm_fwd(p, config, batch.ids, batch.slot_pos,
                         proj_tokens.reshape(bsz, 2, k, config.d_lm))
    return logits, (p, vcache, prc, lmc)


def backward(dlogits: np.ndarray, cache, config: ModelConfig, batch: Batch,
             grads: dict, freeze: bool = True) -> None:
    """Accumulate parameter gradients of a scalar with d(scalar)/d(logits)
    given; frozen groups are zeroed afterwards unless freeze=False."""
    p, vcache, prc, lmc = cache
    bsz = batch.ids.shape[0]
    k = config.k_img
    dslots = lm_bwd(dlogits, lmc, config, batch.ids, grads)
    dvis, dwp, dbp = nn.linear_bwd(dslots.reshape(bsz * 2, k, config.d_lm), prc)
    grads["proj.w"] += dwp
    grads["proj.b"] += dbp
    vision_bwd(dvis, vcache, p, config, grads)
    if freeze:
        apply_freeze(grads, config)


# ----------------------------------------------------------------- decode ---


def greedy_decode_batch(params: dict, config: ModelConfig, vocab: TokenVocab,
                        samples: list[EncodedSample], images, max_new: int = 64):
    """Greedy continuation of prompt-only samples.

    Appends the argmax token (ties break toward the lowest token id) until
    <eos> or max_new tokens; returns (generated id lists, truncated flags).
    The vision/projection pass runs once; the LM prefix is re-run per step.
    """
    p = to_f64(params)
    bsz = len(samples)
    k = config.k_img
    lengths = np.array([len(s) for s in samples], dtype=np.int64)
    cap = min(config.max_seq, int(lengths.max()) + max_new)
    ids = np.full((bsz, cap), vocab.pad_id, dtype=np.int64)
    for i, s in enumerate(samples):
        ids[i, : len(s)] = s.token_ids
    slot_pos = np.array([[s.image_slots[0][0], s.image_slots[1][0]] for s in samples])
    imgs = np.asarray(images, dtype=np.float64).reshape(bsz * 2, IMG_SIZE, IMG_SIZE, 3)
    vis_tokens, _ = vision_fwd(p, config, imgs)
    proj_tokens = (vis_tokens @ p["proj.w"] + p["proj.b"]).reshape(bsz, 2, k, config.d_lm)

    out: list[list[int]] = [[] for _ in range(bsz)]
    truncated = [False] * bsz
    alive = []
    for b in range(bsz):
        if lengths[b] < cap and max_new > 0:
            alive.append(b)
        else:
            truncated[b] = True
    while alive:
        rows = np.array(alive)
        t_cur = int(lengths[rows].max())
        logits, _ = lm_fwd(p, config, ids[rows, :t_cur], slot_pos[rows], proj_tokens[rows])
        nxt = logits[np.arange(len(rows)), lengths[rows] - 1].argmax(axis=-1)
        still = []
        for j, b in enumerate(alive):
            tok = int(nxt[j])
            if tok == vocab.eos_id:
                continue
            out[b].append(tok)
            ids[b, lengths[b]] = tok
            lengths[b] += 1
            if len(out[b]) >= max_new or lengths[b] >= cap:
                truncated[b] = True
            else:
                still.append(b)
        alive = still
    return out, truncated


def greedy_decode(params: dict, config: ModelConfig, vocab: TokenVocab,
                  sample: EncodedSample, images, max_new: int = 64):
    """Single-sample greedy decode -> (generated ids, truncated flag)."""
    outs, trunc = greedy_decode_batch(params, config, vocab, [sample], [images], max_new)
    return outs[0], trunc[0]


# ------------------------------------------------------- special tokens ---


def expand_vocab(params: dict, config: ModelConfig, new_size: int) -> dict:
    """Grow token embedding and output head to a larger vocabulary; new rows
    start from the init distribution and are normally overwritten by
    init_special_embedding right after."""
    old = params["lm.tok"].shape[0]
    if new_size < old:
        raise ConfigError(f"cannot shrink vocab {old} -> {new_size}")
    if new_size == old:
        return params
    rng = np.random.Generator(np.random.PCG64(stable_hash(config.seed, "vocab_expand", old, new_size)))
    grow = new_size - old
    p = dict(params)
    p["lm.tok"] = np.vstack([params["lm.tok"], rng.normal(0.0, 0.02, (grow, config.d_lm)).astype(np.float32)])
    p["lm.head.w"] = np.hstack([params["lm.head.w"], rng.normal(0.0, 0.02, (config.d_lm, grow)).astype(np.float32)])
    p["lm.head.b"] = np.concatenate([params["lm.head.b"], np.zeros(grow, dtype=np.float32)])
    return p


def init_special_embedding(params: dict, vocab: TokenVocab, new_token: str,
                           old_token_ids: list[int]) -> dict:
    """Set the new token's embedding (and untied head column/bias) to the
    arithmetic mean over its pre-registration tokenization."""
    if not old_token_ids:
        raise ValueError(f"empty old-id list for special token {new_token!r}")
    tid = vocab.id(new_token)
    if tid == vocab.unk_id and new_token != vocab.tokens[vocab.unk_id]:
        raise ValueError(f"token {new_token!r} not present in vocabulary")
    idx = np.asarray(old_token_ids, dtype=np.int64)
    p = dict(params)
    p["lm.tok"] = params["lm.tok"].copy()
    p["lm.head.w"] = params["lm.head.w"].copy()
    p["lm.head.b"] = params["lm.head.b"].copy()
    p["lm.tok"][tid] = params["lm.tok"][idx].mean(axis=0)
    p["lm.head.w"][:, tid] = params["lm.head.w"][:, idx].mean(axis=1)
    p["lm.head.b"][tid] = params["lm.head.b"][idx].mean()
    return p


# ------------------------------------------------------------- checkpoint ---


def save_checkpoint(params: dict, config: ModelConfig, vocab: TokenVocab,
                    path: str, step: int = 0, val_metrics: dict | None = None,
                    extra: dict | None = None) -> None:
    """Versioned container: RDL1 magic, JSON header, little-endian float32
    tensors in header order."""
    names = sorted(params)
    header = {
        "format_version": 1,
        "config": asdict(config),
        "vocab": {
            "tokens": vocab.tokens,
            "special": sorted(vocab.special),
            "fingerprint": vocab.fingerprint,
        },
        "step": int(step),
        "val_metrics": val_metrics or {},
        "extra": extra or {},
        "tensors": [[n, list(params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_checkpoint(path: str, expect_fingerprint: str | None = None):
    """-> (params, meta). meta holds config, vocab, step, val_metrics, extra."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    hlen = int.from_bytes(data[4:8], "little")
    if len(data) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if expect_fingerprint is not None and header["vocab"]["fingerprint"] != expect_fingerprint:
        raise VocabMismatchError(
            f"{path}: checkpoint vocabulary fingerprint "
            f"{header['vocab']['fingerprint'][:12]}... does not match expected "
            f"{expect_fingerprint[:12]}..."
        )
    params = {}
    off = 8 + hlen
    for name, shape in header["tensors"]:
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        raw = data[off : off + n_bytes]
        if len(raw) != n_bytes:
            raise CheckpointError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        off += n_bytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    vocab = TokenVocab(header["vocab"]["tokens"], frozenset(header["vocab"]["special"]))
    if vocab.fingerprint != header["vocab"]["fingerprint"]:
        raise CheckpointError(f"{path}: vocabulary fingerprint does not match its token list")
    meta = {
        "config": ModelConfig(**header["config"]),
        "vocab": vocab,
        "step": header["step"],
        "val_metrics": header["val_metrics"],
        "extra": header.get("extra", {}),
    }
    return params, meta


# ------------------------------------------------------------------ probe ---


def probe_batch(vocab: TokenVocab, config: ModelConfig) -> Batch:
    """Fixed builtin batch for cross-build logit regression dumps."""
    prompts = [
        "[IMG1] [IMG2] What edits transform the first image into the second?",
        "Given the source [IMG1] and the result [IMG2], list the operations applied.",
    ]
    answers = [
        "The edit applied brightness with value 0.50.",
        "The edits applied were: contrast with value -0.25, hue with value 0.40.",
    ]
    samples = [
        assemble(vocab, vocab.tokenize(p), vocab.tokenize(a), config.k_img)
        for p, a in zip(prompts, answers)
    ]
    images = np.stack(
        [
            np.stack([synth_image(11), synth_image(12)]),
            np.stack([synth_image(13), synth_image(14)]),
        ]
    )
    return build_batch(samples, images, config, vocab)

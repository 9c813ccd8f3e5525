"""Losses, auxiliary objectives, pretraining stages, and the fine-tune loop.

The language-model loss is masked to answer tokens only. Experiment 2 adds
a parameter-MSE auxiliary computed from expected digits at teacher-forced
positions (the differentiable surrogate of "MSE between predicted and
ground-truth parameters"); experiment 3 adds a three-component heuristic on
the teacher-forced argmax parse; experiments 4/4x switch to <break>-style
prompts with freshly registered special tokens. Gradients come from the
hand-written backward pass and are verified against central differences.
"""

from __future__ import annotations

import datetime
import json
import os
import types
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import dataset as ds
from . import evalkit
from . import model as mdl
from . import nn
from .dataset import Manifest
from .errors import ConfigError, DivergenceError, MaskError, VocabMismatchError
from .imgedit import EditSpec, OP_NAMES, apply_spec, stable_hash, synth_image
from .prompting import (
    BREAK,
    EncodedSample,
    IMG1,
    IMG2,
    TokenVocab,
    assemble,
    build_vocab,
    register_special_tokens,
    select_and_render,
)

EXPERIMENTS = ("1", "2", "3", "4", "4x")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "1"
    epochs: int = 10
    batch_size: int = 2
    warmup_steps: int = 200
    peak_lr: float = 1e-3
    floor_lr: float = 1e-5
    weight_decay: float = 0.01
    aux_weight: float = 1.0
    aux_detached: bool = True
    c2_binary: bool = False
    unfrozen: bool = False
    seed: int = 0
    max_new: int = 64
    val_subset: int = 0  # 0 = full validation split

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size != 2:
            raise ConfigError("the fine-tune contract pairs one with-command and one "
                              "without-command sample per step; batch_size must be 2")

    @property
    def break_style(self) -> bool:
        return self.experiment in ("4", "4x")

    @property
    def special_tokens(self) -> list[str]:
        if self.experiment == "4":
            return [BREAK]
        if self.experiment == "4x":
            return [BREAK, IMG1, IMG2, *OP_NAMES]
        return []


def lr_at(step: int, total: int, config: ExperimentConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to floor_lr."""
    if step < config.warmup_steps:
        return config.peak_lr * (step + 1) / config.warmup_steps
    prog = min(1.0, (step - config.warmup_steps) / max(1, total - config.warmup_steps))
    return config.floor_lr + 0.5 * (config.peak_lr - config.floor_lr) * (1.0 + np.cos(np.pi * prog))


class AdamW:
    """Adam with decoupled weight decay; float64 moments over float32 masters.

    Weight decay applies to matrices/embeddings (ndim >= 2) only. Frozen
    parameters are simply not in `names` and never touched.
    """

    def __init__(self, params: dict, names: list[str], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.names = list(names)
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(params[n].shape) for n in self.names}
        self.v = {n: np.zeros(params[n].shape) for n in self.names}

    def step(self, params: dict, grads: dict, lr: float,
             p64: dict | None = None) -> None:
        """Update float32 masters in-place (math in float64); when a rolling
        float64 view dict is passed, its entries are refreshed too."""
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for n in self.names:
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            p = params[n].astype(np.float64)
            if self.wd and params[n].ndim >= 2:
                p *= 1.0 - lr * self.wd
            p -= (lr / bc1) * (m / denom)
            params[n] = p.astype(np.float32)
            if p64 is not None:
                p64[n] = params[n].astype(np.float64)


# ------------------------------------------------------------------ losses ---


def lm_loss(logits: np.ndarray, target_ids: np.ndarray, loss_mask: np.ndarray):
    """Masked next-token cross entropy -> (scalar, d loss / d logits).

    logits[t-1] predicts target_ids[t]; only positions with loss_mask == 1
    contribute, each sample is averaged over its own masked positions, and
    the batch is averaged over samples. Positions with mask 0 contribute
    exactly zero to both the value and the gradient.
    """
    if logits.ndim == 2:
        logits = logits[None]
    target_ids = np.atleast_2d(target_ids)
    loss_mask = np.atleast_2d(loss_mask)
    bsz = logits.shape[0]
    if loss_mask.sum() == 0:
        raise MaskError("loss mask is all zero")
    if loss_mask[:, 0].any():
        raise MaskError("position 0 has no predecessor and cannot carry loss")
    n_per = loss_mask[:, 1:].sum(axis=1).astype(np.float64)
    if (n_per == 0).any():
        raise MaskError("a sample in the batch has an all-zero loss mask")
    preds = logits[:, :-1]
    tgt = target_ids[:, 1:]
    m = loss_mask[:, 1:].astype(np.float64)
    mx = preds.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(preds - mx).sum(axis=-1, keepdims=True))
    logp = np.take_along_axis(preds - lse, tgt[..., None], axis=-1)[..., 0]
    loss = float(np.mean((-logp * m).sum(axis=1) / n_per))
    w = m / (bsz * n_per[:, None])
    dpred = np.exp(preds - lse) * w[..., None]
    b_i, t_i = np.nonzero(m)
    dpred[b_i, t_i, tgt[b_i, t_i]] -= w[b_i, t_i]
    dlogits = np.zeros(logits.shape)
    dlogits[:, :-1] = dpred
    return loss, dlogits


def mse_aux(logits: np.ndarray, sample: EncodedSample, gt_spec: EditSpec,
            vocab: TokenVocab):
    """Differentiable parameter-MSE surrogate for one sample.

    At each teacher-forced digit position the expected digit is
    sum_d d * softmax(logits)[token(d)]; the three digits reconstruct a
    magnitude that takes the ground-truth sign. Returns
    (scalar, per-op reconstructed values, d loss / d logits).
    """
    if not sample.value_digit_positions:
        raise MaskError("sample has no value digit positions")
    v = logits.shape[-1]
    w_full = np.zeros(v)
    w_full[vocab.digit_ids] = np.arange(10, dtype=np.float64)
    scale = {0: 1.0, 1: 0.1, 2: 0.01}
    by_op: dict[int, list[tuple[int, int]]] = {}
    for pos, place, op_idx in sample.value_digit_positions:
        by_op.setdefault(op_idx, []).append((pos, place))
    n_ops = len(by_op)
    dlogits = np.zeros(logits.shape)
    vhats = []
    loss = 0.0
    probs = {}
    for op_idx in sorted(by_op):
        gt_value = gt_spec.ops[op_idx].value
        sign = 1.0 if gt_value >= 0 else -1.0
        dhat = {}
        for pos, place in by_op[op_idx]:
            p = nn.softmax(logits[pos - 1])
            probs[(op_idx, place)] = (pos - 1, p)
            dhat[place] = float(p @ w_full)
        vhat = sign * (dhat[0] + 0.1 * dhat[1] + 0.01 * dhat[2])
        vhats.append(vhat)
        err = vhat - gt_value
        loss += err * err / n_ops
        for place in (0, 1, 2):
            row, p = probs[(op_idx, place)]
            coeff = 2.0 * err * sign * scale[place] / n_ops
            dlogits[row] += coeff * p * (w_full - dhat[place])
    return float(loss), vhats, dlogits


def mse_aux_batch(logits: np.ndarray, samples: list[EncodedSample],
                  specs: list[EditSpec], vocab: TokenVocab):
    """Mean of mse_aux over a batch -> (scalar, vhat lists, d/d logits)."""
    bsz = len(samples)
    dlogits = np.zeros(logits.shape)
    total = 0.0
    vhats = []
    for b, (sample, spec) in enumerate(zip(samples, specs)):
        l, vh, dl = mse_aux(logits[b], sample, spec, vocab)
        total += l / bsz
        dlogits[b] = dl / bsz
        vhats.append(vh)
    return total, vhats, dlogits


def heuristic_aux(parsed: evalkit.ParsedPrediction, gt_spec: EditSpec,
                  c2_binary: bool = False):
    """Three-component heuristic -> (mean, c1, c2, c3).

    c1 penalizes an op-count mismatch, c2 the name-intersection shortfall
    (or, with c2_binary, an empty intersection), c3 is the zero-fill
    parameter MSE over ground-truth ops.
    """
    ng = len(gt_spec.ops)
    c1 = min(1.0, abs(len(parsed.ops) - ng) / ng)
    inter = len(parsed.names & set(gt_spec.names))
    c2 = (1.0 if inter == 0 else 0.0) if c2_binary else 1.0 - inter / ng
    c3 = evalkit.param_mse(parsed, gt_spec)
    return (c1 + c2 + c3) / 3.0, c1, c2, c3


def teacher_forced_parse(logits: np.ndarray, sample: EncodedSample,
                         vocab: TokenVocab) -> evalkit.ParsedPrediction:
    """Argmax prediction at every answer position, detokenized and parsed."""
    positions = np.nonzero(sample.loss_mask)[0]
    pred_ids = logits[positions - 1].argmax(axis=-1)
    return evalkit.parse_output(vocab.detokenize(pred_ids))


# -------------------------------------------------------------- grad check ---


@dataclass
class GradCheckResult:
    max_rel_err_lm: float
    max_rel_err_total: float
    n_checked: int
    frozen_zero_ok: bool
    frozen_groups: tuple[str, ...]
    details: list


def _grad_probe(vocab: TokenVocab, config: mdl.ModelConfig):
    """Small fixed batch (one with-command, one without) with known specs."""
    records = [ds.gen_record(424242, i) for i in range(2)]
    samples, images, specs = [], [], []
    for rec, use_cmd in zip(records, (True, False)):
        rng = np.random.Generator(np.random.PCG64(stable_hash("gradprobe", rec.id)))
        text, tpl = select_and_render(rec, use_cmd, rng)
        samples.append(assemble(vocab, vocab.tokenize(text),
                                vocab.tokenize(rec.answer_text), config.k_img,
                                uses_command=use_cmd, template_id=tpl))
        src = synth_image(rec.seed)
        images.append(np.stack([src, apply_spec(src, rec.spec)]))
        specs.append(rec.spec)
    return mdl.build_batch(samples, images, config, vocab), specs


def grad_check(params: dict, config: mdl.ModelConfig, vocab: TokenVocab,
               n_samples: int = 200, h: float = 1e-4, seed: int = 0) -> GradCheckResult:
    """Analytic gradients of lm_loss and lm_loss + mse_aux versus central
    finite differences on <= n_samples scalars spanning every trainable
    parameter group; frozen groups are asserted exactly zero instead."""
    batch, specs = _grad_probe(vocab, config)

    def losses(p64):
        logits, _ = mdl.forward(params, config, batch, p64=p64)
        l_lm, _ = lm_loss(logits, batch.ids, batch.mask)
        l_aux, _, _ = mse_aux_batch(logits, batch.samples, specs, vocab)
        return l_lm, l_lm + l_aux

    p64 = mdl.to_f64(params)
    logits, cache = mdl.forward(params, config, batch, p64=p64)
    l_lm, d_lm = lm_loss(logits, batch.ids, batch.mask)
    _, _, d_aux = mse_aux_batch(logits, batch.samples, specs, vocab)
    g_lm = mdl.zero_grads(params)
    mdl.backward(d_lm, cache, config, batch, g_lm)
    g_total = mdl.zero_grads(params)
    mdl.backward(d_lm + d_aux, cache, config, batch, g_total)

    frozen = mdl.frozen_groups(config)
    frozen_zero_ok = all(
        not g_total[n].any() and not g_lm[n].any()
        for n in params if mdl.param_group(n) in frozen
    )

    rng = np.random.Generator(np.random.PCG64(stable_hash(seed, "gradcheck")))
    trainable = mdl.trainable_names(params, config)
    groups: dict[str, list[str]] = {}
    for n in trainable:
        groups.setdefault(mdl.param_group(n), []).append(n)
    picks: list[tuple[str, int]] = []
    group_names = sorted(groups)
    while len(picks) < n_samples:
        for gname in group_names:
            if len(picks) >= n_samples:
                break
            name = groups[gname][int(rng.integers(len(groups[gname])))]
            picks.append((name, int(rng.integers(params[name].size))))

    details = []
    max_lm = 0.0
    max_total = 0.0
    for name, flat in picks:
        base = p64[name].flat[flat]
        p64[name].flat[flat] = base + h
        lm_p, tot_p = losses(p64)
        p64[name].flat[flat] = base - h
        lm_m, tot_m = losses(p64)
        p64[name].flat[flat] = base
        fd_lm = (lm_p - lm_m) / (2.0 * h)
        fd_tot = (tot_p - tot_m) / (2.0 * h)
        a_lm = g_lm[name].flat[flat]
        a_tot = g_total[name].flat[flat]
        e_lm = abs(a_lm - fd_lm) / (abs(a_lm) + abs(fd_lm) + 1e-8)
        e_tot = abs(a_tot - fd_tot) / (abs(a_tot) + abs(fd_tot) + 1e-8)
        max_lm = max(max_lm, e_lm)
        max_total = max(max_total, e_tot)
        details.append((name, flat, a_tot, fd_tot, e_tot, a_lm, fd_lm, e_lm))
    return GradCheckResult(max_lm, max_total, len(picks), frozen_zero_ok,
                           tuple(sorted(frozen)), details)


# -------------------------------------------------------------- pretraining ---


def pretrain_vision(params: dict, config: mdl.ModelConfig, seed: int,
                    n_images: int = 5000, max_epochs: int = 5,
                    target_mse: float = 0.01, batch_size: int = 64,
                    lr: float = 3e-3):
    """Train the vision encoder with a throwaway linear pixel decoder until
    held-out per-pixel reconstruction MSE < target (or the epoch cap)."""
    if n_images < 1000:
        raise ConfigError("vision pretraining needs a non-trivial image corpus")
    imgs = np.stack([synth_image(stable_hash(seed, "vimg", i)) for i in range(n_images + 256)])
    train_imgs, held = imgs[:n_images], imgs[n_images:]
    rng = np.random.Generator(np.random.PCG64(stable_hash(seed, "vdec")))
    flat_dim = config.k_img * config.d_vision
    out_dim = train_imgs[0].size
    work = dict(params)
    work["dec.w"] = rng.normal(0.0, 0.02, (flat_dim, out_dim)).astype(np.float32)
    work["dec.b"] = np.zeros(out_dim, dtype=np.float32)
    names = [n for n in sorted(work) if n.startswith(("vis.", "dec."))]
    opt = AdamW(work, names, weight_decay=0.0)

    def recon_mse(p64, batch_imgs):
        tokens, _ = mdl.vision_fwd(p64, config, batch_imgs)
        flat = tokens.reshape(len(batch_imgs), flat_dim)
        recon = flat @ p64["dec.w"] + p64["dec.b"]
        return recon, float(np.mean((recon - batch_imgs.reshape(len(batch_imgs), -1)) ** 2))

    step = 0
    exit_mse = np.inf
    p64 = mdl.to_f64(work)
    order_rng = np.random.Generator(np.random.PCG64(stable_hash(seed, "vorder")))
    for epoch in range(max_epochs):
        perm = order_rng.permutation(n_images)
        for start in range(0, n_images - batch_size + 1, batch_size):
            sel = train_imgs[perm[start : start + batch_size]]
            tokens, vcache = mdl.vision_fwd(p64, config, sel)
            flat = tokens.reshape(batch_size, flat_dim)
            recon, rc = nn.linear_fwd(flat, p64["dec.w"], p64["dec.b"])
            target = sel.reshape(batch_size, -1)
            diff = recon - target
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise DivergenceError(f"vision pretraining diverged at step {step}")
            grads = {n: np.zeros(work[n].shape) for n in names}
            dflat, dw, db = nn.linear_bwd(2.0 * diff / diff.size, rc)
            grads["dec.w"] += dw
            grads["dec.b"] += db
            mdl.vision_bwd(dflat.reshape(batch_size, config.k_img, config.d_vision),
                           vcache, p64, config, grads)
            opt.step(work, grads, lr * min(1.0, (step + 1) / 50.0), p64)
            step += 1
            if step % 20 == 0:
                _, exit_mse = recon_mse(p64, held)
                if exit_mse < target_mse:
                    break
        else:
            _, exit_mse = recon_mse(p64, held)
            if exit_mse >= target_mse:
                continue
        break
    _, exit_mse = recon_mse(p64, held)
    out = {n: v for n, v in work.items() if not n.startswith("dec.")}
    return out, {"recon_mse": exit_mse, "steps": step}


def _pretrain_pairs(vocab: TokenVocab, config: mdl.ModelConfig, seed: int, n_pairs: int):
    """(prompt, answer) text pairs over random specs; no images involved."""
    samples = []
    for i in range(n_pairs):
        rng = np.random.Generator(np.random.PCG64(stable_hash(seed, "pair", i)))
        spec = ds.gen_spec(rng)
        command = ds.gen_command(spec, stable_hash(seed, "paircmd", i))
        rec = types.SimpleNamespace(id=f"p{i}", command=command)
        text, tpl = select_and_render(rec, i % 2 == 0, rng)
        sample = assemble(vocab, vocab.tokenize(text),
                          vocab.tokenize(ds.render_ground_truth(spec)),
                          config.k_img, uses_command=i % 2 == 0, template_id=tpl)
        mask = np.ones(len(sample), dtype=np.int8)
        mask[0] = 0
        for pos, k in sample.image_slots:
            mask[pos : pos + k] = 0
        samples.append((sample, mask))
    return samples


def _placeholders(config: mdl.ModelConfig, seed: int) -> np.ndarray:
    """Fixed per-slot placeholder embeddings used in place of images."""
    rng = np.random.Generator(np.random.PCG64(stable_hash(seed, "placeholder")))
    ph = rng.normal(0.0, 0.02, (2, config.d_lm))
    return np.repeat(ph[:, None, :], config.k_img, axis=1)


def pretrain_lm(params: dict, config: mdl.ModelConfig, vocab: TokenVocab, seed: int,
                n_pairs: int = 50000, epochs: int = 3, batch_size: int = 16,
                lr: float = 1e-3, holdout: int | None = None):
    """Next-token training of the LM alone on rendered (prompt, answer)
    pairs, image slots filled by fixed placeholder embeddings; the loss
    covers all text positions (slot targets excluded)."""
    n_hold = holdout if holdout is not None else max(200, n_pairs // 50)
    all_samples = _pretrain_pairs(vocab, config, seed, n_pairs + n_hold)
    train_set, held = all_samples[:n_pairs], all_samples[n_pairs:]
    ph = _placeholders(config, seed)
    names = [n for n in sorted(params) if n.startswith("lm.")]
    opt = AdamW(params, names, weight_decay=0.01)
    steps_per = n_pairs // batch_size
    total = steps_per * epochs
    exp_cfg = ExperimentConfig(peak_lr=lr, warmup_steps=min(100, max(1, total // 10)))

    def run_batch(p64, batch, train: bool, grads=None):
        t_max = max(len(s) for s, _ in batch)
        ids = np.full((len(batch), t_max), vocab.pad_id, dtype=np.int64)
        mask = np.zeros((len(batch), t_max), dtype=np.int8)
        slot_pos = np.zeros((len(batch), 2), dtype=np.int64)
        for i, (s, m) in enumerate(batch):
            ids[i, : len(s)] = s.token_ids
            mask[i, : len(s)] = m
            slot_pos[i] = (s.image_slots[0][0], s.image_slots[1][0])
        slot_values = np.broadcast_to(ph, (len(batch), 2, config.k_img, config.d_lm))
        logits, cache = mdl.lm_fwd(p64, config, ids, slot_pos, slot_values)
        loss, dlogits = lm_loss(logits, ids, mask)
        if train:
            mdl.lm_bwd(dlogits, cache, config, ids, grads)
        return loss

    step = 0
    p64 = mdl.to_f64(params)
    order_rng = np.random.Generator(np.random.PCG64(stable_hash(seed, "lmorder")))
    for epoch in range(epochs):
        perm = order_rng.permutation(n_pairs)
        for start in range(0, steps_per * batch_size, batch_size):
            batch = [train_set[j] for j in perm[start : start + batch_size]]
            grads = {n: np.zeros(params[n].shape) for n in names}
            loss = run_batch(p64, batch, train=True, grads=grads)
            if not np.isfinite(loss):
                raise DivergenceError(f"LM pretraining diverged at step {step}")
            opt.step(params, grads, lr_at(step, total, exp_cfg), p64)
            step += 1

    ce = np.mean([
        run_batch(p64, held[i : i + batch_size], train=False)
        for i in range(0, len(held) - batch_size + 1, batch_size)
    ])
    opname_ids = {vocab.id(n) for n in OP_NAMES}
    probe_prefix = vocab.tokenize("The edit applied")
    hits = 0
    n_probe = min(100, len(held))
    for s, _ in held[:n_probe]:
        n_prompt = int(np.argmax(s.loss_mask))
        ids = np.concatenate([s.token_ids[:n_prompt], probe_prefix])[None]
        slot_pos = np.array([[s.image_slots[0][0], s.image_slots[1][0]]])
        slot_values = np.broadcast_to(ph, (1, 2, config.k_img, config.d_lm))
        logits, _ = mdl.lm_fwd(p64, config, ids, slot_pos, slot_values)
        hits += int(int(logits[0, -1].argmax()) in opname_ids)
    return params, {"holdout_ce": float(ce), "opname_rate": hits / n_probe, "steps": step}


# ---------------------------------------------------------------- training ---


@dataclass
class TrainResult:
    run_dir: str
    best_step: int
    best_epoch: int
    best_accuracy: float
    best_mse: float
    steps: int
    ckpt_best: str
    ckpt_last: str


def _write_config_echo(run_dir: str, exp: ExperimentConfig, cfg: mdl.ModelConfig,
                       extras: dict) -> None:
    lines = []
    for k, v in sorted({**asdict(exp), **{f"model.{k}": v for k, v in asdict(cfg).items()},
                        **extras}.items()):
        lines.append(f"{k}={v}")
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_meta(run_dir: str, seed: int) -> None:
    """Run provenance; the only artifact allowed to carry a timestamp."""
    from . import __version__

    threads = os.environ.get("OPENBLAS_NUM_THREADS") or os.environ.get(
        "OMP_NUM_THREADS") or str(os.cpu_count())
    with open(os.path.join(run_dir, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"seed={seed}\n")
        fh.write(f"threads={threads}\n")
        fh.write(f"version=revdesign-{__version__}\n")
        fh.write(f"started={datetime.datetime.now().isoformat(timespec='seconds')}\n")


def train(exp: ExperimentConfig, manifest: Manifest, run_dir: str,
          init: str | None = None, model_config: mdl.ModelConfig | None = None,
          log_every: int = 1) -> TrainResult:
    """Run one experiment: pair-batched fine-tuning with per-epoch validation
    and best-checkpoint selection (highest accuracy, then lower MSE, then
    earlier step)."""
    os.makedirs(run_dir, exist_ok=True)
    _write_meta(run_dir, exp.seed)
    base_vocab = build_vocab()
    vocab = base_vocab
    if exp.special_tokens:
        vocab = register_special_tokens(base_vocab, exp.special_tokens)

    if init is not None:
        params, meta = mdl.load_checkpoint(init)
        if meta["vocab"].fingerprint != base_vocab.fingerprint:
            raise VocabMismatchError(
                f"init checkpoint vocabulary does not match the builtin vocabulary"
            )
        cfg = meta["config"]
    else:
        cfg = model_config or mdl.ModelConfig(vocab_size=len(base_vocab), seed=exp.seed)
        cfg = replace(cfg, vocab_size=len(base_vocab))
        params = mdl.init_params(replace(cfg, seed=exp.seed))
    cfg = replace(
        cfg,
        vocab_size=len(vocab),
        seed=exp.seed,
        freeze_vision=not exp.unfrozen,
        freeze_lm=not exp.unfrozen,
    )
    if len(vocab) > params["lm.tok"].shape[0]:
        params = mdl.expand_vocab(params, cfg, len(vocab))
    for name in exp.special_tokens:
        params = mdl.init_special_embedding(params, vocab, name, vocab.init_descriptors[name])

    train_recs = sorted(manifest.split("train"), key=lambda r: r.id)
    val_recs = sorted(manifest.split("val"), key=lambda r: r.id)
    if not train_recs or not val_recs:
        raise ConfigError("manifest needs non-empty train and val splits")
    if exp.val_subset:
        val_recs = val_recs[: exp.val_subset]

    steps_per_epoch = len(train_recs) // 2
    total_steps = steps_per_epoch * exp.epochs
    opt = AdamW(params, mdl.trainable_names(params, cfg), weight_decay=exp.weight_decay)

    def encode(rec, use_command, rng):
        text, tpl = select_and_render(rec, use_command, rng, break_style=exp.break_style)
        sample = assemble(vocab, vocab.tokenize(text), vocab.tokenize(rec.answer_text),
                          cfg.k_img, uses_command=use_command, template_id=tpl)
        return sample, np.stack(manifest.load_images(rec))

    best = None  # (accuracy, mse, step, epoch)
    step = 0
    p64 = mdl.to_f64(params)
    runlog_path = os.path.join(run_dir, "runlog.csv")
    vallog_path = os.path.join(run_dir, "vallog.csv")
    ckpt_best = os.path.join(run_dir, "ckpt_best.bin")
    ckpt_last = os.path.join(run_dir, "ckpt_last.bin")
    runlog = open(runlog_path, "w", encoding="utf-8")
    runlog.write("step,epoch,lm_loss,aux,aux_c1,aux_c2,aux_c3,lr,n_with,n_without\n")
    vallog = open(vallog_path, "w", encoding="utf-8")
    vallog.write("epoch,step,val_accuracy,val_mse,is_best\n")
    try:
        for epoch in range(exp.epochs):
            rng = np.random.Generator(np.random.PCG64(stable_hash(exp.seed, "epoch", epoch)))
            perm = rng.permutation(len(train_recs))
            n_with = n_without = 0
            for pair in range(steps_per_epoch):
                a, b = train_recs[perm[2 * pair]], train_recs[perm[2 * pair + 1]]
                if rng.random() < 0.5:
                    a, b = b, a
                s_with, img_with = encode(a, True, rng)
                s_wo, img_wo = encode(b, False, rng)
                n_with += 1
                n_without += 1
                batch = mdl.build_batch([s_with, s_wo], np.stack([img_with, img_wo]), cfg, vocab)
                logits, cache = mdl.forward(params, cfg, batch, p64=p64)
                lm, dlogits = lm_loss(logits, batch.ids, batch.mask)
                aux = c1 = c2 = c3 = 0.0
                specs = [a.spec, b.spec]
                if exp.experiment == "2":
                    aux, _, d_aux = mse_aux_batch(logits, batch.samples, specs, vocab)
                    if not exp.aux_detached:
                        dlogits = dlogits + exp.aux_weight * d_aux
                elif exp.experiment == "3":
                    comps = []
                    for i in range(2):
                        parsed = teacher_forced_parse(logits[i], batch.samples[i], vocab)
                        comps.append(heuristic_aux(parsed, specs[i], exp.c2_binary))
                    c1 = float(np.mean([c[1] for c in comps]))
                    c2 = float(np.mean([c[2] for c in comps]))
                    if exp.aux_detached:
                        c3 = float(np.mean([c[3] for c in comps]))
                    else:
                        c3, _, d_aux = mse_aux_batch(logits, batch.samples, specs, vocab)
                        dlogits = dlogits + exp.aux_weight * (d_aux / 3.0)
                    aux = (c1 + c2 + c3) / 3.0
                total = lm + exp.aux_weight * aux
                if not np.isfinite(total):
                    dump = os.path.join(run_dir, "divergence.txt")
                    with open(dump, "w", encoding="utf-8") as fh:
                        fh.write(f"step={step} epoch={epoch} lm={lm} aux={aux}\n")
                    raise DivergenceError(f"non-finite loss at step {step} (dump: {dump})")
                grads = mdl.zero_grads(params)
                mdl.backward(dlogits, cache, cfg, batch, grads)
                lr = lr_at(step, total_steps, exp)
                opt.step(params, grads, lr, p64)
                if step % log_every == 0 or pair == steps_per_epoch - 1:
                    runlog.write(
                        f"{step},{epoch},{lm:.6f},{aux:.6f},{c1:.6f},{c2:.6f},{c3:.6f},"
                        f"{lr:.8f},{n_with},{n_without}\n"
                    )
                step += 1
            report, _ = evalkit.evaluate(
                params, cfg, vocab, manifest, val_recs,
                eval_seed=stable_hash(exp.seed, "val"), max_new=exp.max_new,
                break_style=exp.break_style,
            )
            acc = report.partitions["all"].accuracy
            mse = report.partitions["all"].mse
            is_best = best is None or (acc, -mse) > (best[0], -best[1])
            if is_best:
                best = (acc, mse, step, epoch)
                mdl.save_checkpoint(
                    params, cfg, vocab, ckpt_best, step=step,
                    val_metrics={"accuracy": acc, "mse": mse, "epoch": epoch},
                    extra={"experiment": exp.experiment, "break_style": exp.break_style,
                           "seed": exp.seed},
                )
            vallog.write(f"{epoch},{step},{acc:.6f},{mse:.6f},{int(is_best)}\n")
    finally:
        runlog.close()
        vallog.close()
    mdl.save_checkpoint(
        params, cfg, vocab, ckpt_last, step=step,
        val_metrics={"accuracy": best[0], "mse": best[1], "epoch": best[3]},
        extra={"experiment": exp.experiment, "break_style": exp.break_style,
               "seed": exp.seed},
    )
    _write_config_echo(run_dir, exp, cfg, {
        "n_train": len(train_recs), "n_val": len(val_recs),
        "init": init or "", "vocab_fingerprint": vocab.fingerprint,
        "total_steps": total_steps,
    })
    return TrainResult(run_dir, best[2], best[3], best[0], best[1], step,
                       ckpt_best, ckpt_last)

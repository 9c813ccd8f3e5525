"""Prompt templates, closed-world tokenizer, and sample assembly.

The model never sees raw text: prompts and answers are tokenized against a
small fixed vocabulary (words plus single-character digits/punctuation) and
assembled into one id sequence with a per-position loss mask and two
image-token slots whose embeddings the model later overwrites.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import dataset as ds
from .errors import AssemblyError, TemplateError, TokenizerError
from .imgedit import OP_NAMES

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
IMG1, IMG2 = "<img1>", "<img2>"
RESERVED = (BOS, EOS, PAD, UNK, IMG1, IMG2)
DIGITS = tuple("0123456789")
BREAK = "<break>"

MARK_IMG1, MARK_IMG2, MARK_COMMAND = "[IMG1]", "[IMG2]", "[COMMAND]"

# Image markers always tokenize to the reserved slot tokens.
_MARKER_LITERALS = {MARK_IMG1: IMG1, MARK_IMG2: IMG2}

# Tokens that glue to the preceding / following token when detokenizing.
_ATTACH_BACK = {".", ",", ":", ";", "?", "!", ")", ">", "'"}
_ATTACH_FWD = {"-", "<", "(", "'"}
_NUM_GLUE = {".", "-"}


def split_tokens(text: str, literals: dict[str, str] | None = None) -> list[str]:
    """Rule-based split into token strings.

    Whitespace separates chunks; inside a chunk, literals (image markers and
    registered special tokens) match atomically, alphabetic runs form word
    tokens, and every other character (digits, punctuation) is emitted as a
    single-character token. `-0.30` therefore becomes `-`,`0`,`.`,`3`,`0`.
    """
    lits = sorted((literals or {}).items(), key=lambda kv: -len(kv[0]))
    out: list[str] = []
    for chunk in text.split():
        i = 0
        while i < len(chunk):
            for lit, tok in lits:
                if chunk.startswith(lit, i):
                    out.append(tok)
                    i += len(lit)
                    break
            else:
                if chunk[i].isalpha():
                    j = i + 1
                    while j < len(chunk) and chunk[j].isalpha():
                        j += 1
                    out.append(chunk[i:j])
                    i = j
                else:
                    out.append(chunk[i])
                    i += 1
    return out


@dataclass(frozen=True)
class PromptTemplate:
    set_name: str
    id: int
    images_at_start: bool
    body: str

    def validate(self) -> None:
        for marker in (MARK_IMG1, MARK_IMG2):
            if self.body.count(marker) != 1:
                raise TemplateError(f"{self.set_name}/{self.id}: {marker} must appear exactly once")
        want_cmd = 1 if self.set_name == "with_command" else 0
        if self.body.count(MARK_COMMAND) != want_cmd:
            raise TemplateError(f"{self.set_name}/{self.id}: bad [COMMAND] count")


class TokenVocab:
    """Dense closed-world vocabulary with atomic special tokens.

    Instances are immutable; registration returns a new vocabulary carrying
    an initialization descriptor (token -> its pre-registration id sequence)
    used to seed embeddings of newly special tokens.
    """

    def __init__(self, tokens: list[str], special: frozenset[str] = frozenset(),
                 init_descriptors: dict[str, list[int]] | None = None):
        self.tokens = list(tokens)
        self.special = frozenset(special)
        self.init_descriptors = dict(init_descriptors or {})
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise TokenizerError("duplicate token strings in vocabulary")
        self._literals = dict(_MARKER_LITERALS)
        for name in self.special:
            self._literals[name] = name
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.pad_id = self._ids[PAD]
        self.unk_id = self._ids[UNK]
        self.img1_id = self._ids[IMG1]
        self.img2_id = self._ids[IMG2]
        self.digit_ids = np.array([self._ids[d] for d in DIGITS], dtype=np.int64)
        self.dot_id = self._ids["."]
        self.dash_id = self._ids["-"]

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def tokenize(self, text: str) -> list[int]:
        return [self._ids.get(t, self.unk_id) for t in split_tokens(text, self._literals)]

    def detokenize(self, ids) -> str:
        parts: list[str] = []
        prev: str | None = None
        for tid in ids:
            tok = self.tokens[int(tid)]
            if not parts or tok in _ATTACH_BACK or prev in _ATTACH_FWD:
                sep = ""
            elif tok in DIGITS and (prev in DIGITS or prev in _NUM_GLUE):
                sep = ""
            else:
                sep = " "
            parts.append(sep + tok)
            prev = tok
        return "".join(parts)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.tokens).encode("utf-8"))
        h.update(b"\x00")
        h.update(",".join(sorted(self.special)).encode("utf-8"))
        return h.hexdigest()


def _grammar_scan_texts() -> list[str]:
    """Every text the closed world must cover, markers excluded."""
    texts = []
    for tpl in _raw_templates():
        body = tpl.body
        for marker in (MARK_IMG1, MARK_IMG2, MARK_COMMAND):
            body = body.replace(marker, " ")
        texts.append(body)
    texts.extend(p for pool in ds.PHRASE_POOLS.values() for p in pool)
    texts.extend(ds.STYLE_PREFIXES)
    texts.append("The edit applied x with value -0.30 .")
    texts.append("The edits applied were : x with value 0.45 , x with value 1.00 .")
    texts.extend(OP_NAMES)
    # pre-registration spellings of the special tokens used by experiment 4/4x
    texts.append("< break > img")
    return texts


def build_vocab() -> TokenVocab:
    """Closed vocabulary: reserved tokens, digits, punctuation, then words."""
    words: set[str] = set()
    chars: set[str] = set()
    for text in _grammar_scan_texts():
        for tok in split_tokens(text):
            (words if tok.isalpha() else chars).add(tok)
    chars -= set(DIGITS)
    tokens = list(RESERVED) + list(DIGITS) + sorted(chars) + sorted(words)
    return TokenVocab(tokens)


def register_special_tokens(vocab: TokenVocab, names: list[str]) -> TokenVocab:
    """Return a new vocabulary where `names` are atomic special tokens.

    For each name the returned vocabulary's init_descriptors records the
    pre-registration tokenization (computed against `vocab`), from which
    embedding rows for the new tokens are initialized. Registering a name
    that is already special is rejected.
    """
    new_special = set(vocab.special)
    descriptors = dict(vocab.init_descriptors)
    tokens = list(vocab.tokens)
    for name in names:
        if name in new_special:
            raise TokenizerError(f"token {name!r} already registered as special")
        descriptors[name] = list(vocab.tokenize(name))
        if name not in vocab._ids:
            tokens.append(name)
        new_special.add(name)
    return TokenVocab(tokens, frozenset(new_special), descriptors)


def _raw_templates() -> list[PromptTemplate]:
    text = resources.files(__package__).joinpath("assets/templates.txt").read_text("utf-8")
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        set_name, tid, at_start, body = line.split("|", 3)
        out.append(PromptTemplate(set_name, int(tid), at_start == "1", body))
    return out


def _break_variant(tpl: PromptTemplate) -> PromptTemplate:
    """Insert <break> at every modality boundary (experiment 4 prompts)."""
    out: list[str] = []
    for word in tpl.body.split():
        is_marker = any(m in word for m in (MARK_IMG1, MARK_IMG2, MARK_COMMAND))
        if is_marker and out and out[-1] != BREAK:
            out.append(BREAK)
        out.append(word)
        if is_marker:
            out.append(BREAK)
    while out and out[-1] == BREAK:
        out.pop()
    return PromptTemplate(tpl.set_name, tpl.id, tpl.images_at_start, " ".join(out))


def builtin_templates(set_name: str, break_style: bool = False) -> list[PromptTemplate]:
    """The eight fixed templates of one set, optionally in <break> form."""
    if set_name not in ("with_command", "without_command"):
        raise TemplateError(f"unknown template set {set_name!r}")
    tpls = [t for t in _raw_templates() if t.set_name == set_name]
    if break_style:
        tpls = [_break_variant(t) for t in tpls]
    for t in tpls:
        t.validate()
    if len(tpls) != 8 or sum(t.images_at_start for t in tpls) != 4:
        raise TemplateError(f"template set {set_name} violates count invariants")
    return tpls


def select_and_render(record, use_command: bool, rng: np.random.Generator,
                      break_style: bool = False) -> tuple[str, int]:
    """Uniformly pick a template from the appropriate set and fill [COMMAND].

    Image markers are left in place for assembly.
    """
    set_name = "with_command" if use_command else "without_command"
    tpls = builtin_templates(set_name, break_style=break_style)
    tpl = tpls[int(rng.integers(len(tpls)))]
    text = tpl.body
    if use_command:
        if not record.command:
            raise TemplateError(f"record {record.id} has an empty command")
        text = text.replace(MARK_COMMAND, record.command)
    return text, tpl.id


@dataclass(frozen=True)
class EncodedSample:
    """Model-ready form of one triplet under one prompt template."""

    token_ids: np.ndarray
    loss_mask: np.ndarray
    image_slots: tuple[tuple[int, int], tuple[int, int]]
    value_digit_positions: tuple[tuple[int, int, int], ...]
    uses_command: bool
    template_id: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)


def _expand_prompt(vocab: TokenVocab, prompt_ids: list[int], k_img: int):
    for img_id in (vocab.img1_id, vocab.img2_id):
        if prompt_ids.count(img_id) != 1:
            raise AssemblyError(
                f"prompt must contain each image marker exactly once "
                f"(token {vocab.tokens[img_id]} occurs {prompt_ids.count(img_id)} times)"
            )
    ids = [vocab.bos_id]
    slots = {}
    for tid in prompt_ids:
        if tid == vocab.img1_id or tid == vocab.img2_id:
            slots[tid] = len(ids)
            ids.extend([tid] * k_img)
        else:
            ids.append(tid)
    return ids, ((slots[vocab.img1_id], k_img), (slots[vocab.img2_id], k_img))


def _digit_positions(vocab: TokenVocab, answer_ids: list[int], offset: int):
    """Sequence positions of the three digits of every value in the answer.

    Returns (position, place, op_index) triples with place 0 = integer digit,
    1 = tenths, 2 = hundredths.
    """
    digit_set = set(int(d) for d in vocab.digit_ids)
    entries = []
    op_idx = 0
    i = 0
    while i < len(answer_ids):
        if (
            i + 3 < len(answer_ids)
            and answer_ids[i] in digit_set
            and answer_ids[i + 1] == vocab.dot_id
            and answer_ids[i + 2] in digit_set
            and answer_ids[i + 3] in digit_set
        ):
            entries.append((offset + i, 0, op_idx))
            entries.append((offset + i + 2, 1, op_idx))
            entries.append((offset + i + 3, 2, op_idx))
            op_idx += 1
            i += 4
        else:
            i += 1
    return tuple(entries)


def assemble(vocab: TokenVocab, prompt_ids: list[int], answer_ids: list[int],
             k_img: int, uses_command: bool = False, template_id: int = 0) -> EncodedSample:
    """Build <bos> + prompt (markers expanded to K-token slots) + answer + <eos>.

    The loss mask is 0 on <bos>, prompt, and image slots and 1 exactly on
    answer tokens plus the terminating <eos>.
    """
    ids, slots = _expand_prompt(vocab, list(prompt_ids), k_img)
    n_prompt = len(ids)
    ids = ids + list(answer_ids) + [vocab.eos_id]
    mask = np.zeros(len(ids), dtype=np.int8)
    mask[n_prompt:] = 1
    return EncodedSample(
        token_ids=np.asarray(ids, dtype=np.int64),
        loss_mask=mask,
        image_slots=slots,
        value_digit_positions=_digit_positions(vocab, list(answer_ids), n_prompt),
        uses_command=uses_command,
        template_id=template_id,
    )


def assemble_prompt(vocab: TokenVocab, prompt_ids: list[int], k_img: int,
                    uses_command: bool = False, template_id: int = 0) -> EncodedSample:
    """Prompt-only sample (no answer, no <eos>) for greedy decoding."""
    ids, slots = _expand_prompt(vocab, list(prompt_ids), k_img)
    return EncodedSample(
        token_ids=np.asarray(ids, dtype=np.int64),
        loss_mask=np.zeros(len(ids), dtype=np.int8),
        image_slots=slots,
        value_digit_positions=(),
        uses_command=uses_command,
        template_id=template_id,
    )

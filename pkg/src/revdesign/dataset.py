"""Synthetic triplet corpus: (source image, edited image, vague command).

Every record is a pure function of (global_seed, index), so the corpus is
regenerable byte-for-byte and the manifest can be integrity-checked by
recomputing images from seeds. Ground truth is rendered into a canonical
sentence grammar that round-trips exactly through the output parser.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import imgedit
from .errors import IntegrityError, ManifestError
from .imgedit import EditOp, EditSpec, OP_NAMES, stable_hash

GENERATOR_VERSION = "1"

# Vague-command phrase pools keyed by (operation, sign of value). Phrases
# never name an operation and never contain digits.
PHRASE_POOLS: dict[tuple[str, int], tuple[str, ...]] = {
    ("brightness", +1): ("make it brighter", "lift the shadows", "lighten the scene"),
    ("brightness", -1): ("make it darker", "dim the scene", "deepen the shadows"),
    ("contrast", +1): ("make it pop", "add more punch", "harden the tones"),
    ("contrast", -1): ("soften the tones", "flatten the look", "level the tones"),
    ("saturation", +1): ("boost the colors", "make the colors vivid", "juice up the colors"),
    ("saturation", -1): ("mute the colors", "wash it out", "drain the color away"),
    ("hue", +1): ("shift the palette one way", "rotate the tints forward", "push the tones toward new shades"),
    ("hue", -1): ("shift the palette the other way", "rotate the tints back", "pull the tones toward old shades"),
    ("gamma", +1): ("open up the midtones", "lift the middle range", "reveal the murky parts"),
    ("gamma", -1): ("crush the midtones", "sink the middle range", "darken the murky parts"),
}

STYLE_PREFIXES = ("", "I want to ", "Please ", "Let's ")

OP_COUNT_WEIGHTS = (0.5, 0.3, 0.2)


@dataclass(frozen=True)
class GenConfig:
    """Generation settings for one corpus."""

    op_count_weights: tuple[float, float, float] = OP_COUNT_WEIGHTS
    op_names: tuple[str, ...] = OP_NAMES
    value_low: float = 0.1
    value_high: float = 1.0


@dataclass(frozen=True)
class TripletRecord:
    id: str
    seed: int
    spec: EditSpec
    command: str
    split: str
    source_png: str
    edited_png: str

    @property
    def answer_text(self) -> str:
        return render_ground_truth(self.spec)


@dataclass
class Manifest:
    records: list[TripletRecord]
    generator_version: str
    global_seed: int
    op_vocabulary: tuple[str, ...]
    root: str | None = None
    _cache: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[TripletRecord]:
        return [r for r in self.records if r.split == name]

    def load_images(self, record: TripletRecord) -> tuple[np.ndarray, np.ndarray]:
        """Return (source, edited) as [0,1] reals reconstructed as byte/255.

        Reads PNGs when the manifest is disk-backed, otherwise regenerates
        from the record seed; either way the training-time representation
        is the 8-bit quantized one.
        """
        if record.id not in self._cache:
            if self.root is not None:
                src = imgedit.read_png_bytes(os.path.join(self.root, record.source_png))
                edt = imgedit.read_png_bytes(os.path.join(self.root, record.edited_png))
            else:
                src_f = imgedit.synth_image(record.seed)
                src = imgedit.to_bytes(src_f)
                edt = imgedit.to_bytes(imgedit.apply_spec(src_f, record.spec))
            self._cache[record.id] = (src, edt)
        src, edt = self._cache[record.id]
        return imgedit.from_bytes(src), imgedit.from_bytes(edt)


def format_value(v: float) -> str:
    """Two-decimal rendering shared by the grammar and the manifest."""
    return f"{v:.2f}"


def render_ground_truth(spec: EditSpec) -> str:
    """Canonical sentence form of an EditSpec (bit-exact grammar)."""
    parts = [f"{op.name} with value {format_value(op.value)}" for op in spec.ops]
    if len(parts) == 1:
        return f"The edit applied {parts[0]}."
    return "The edits applied were: " + ", ".join(parts) + "."


def gen_spec(rng: np.random.Generator, config: GenConfig = GenConfig()) -> EditSpec:
    """Draw one EditSpec: op count from the weight table, names without
    replacement, values uniform on +-[value_low, value_high] quantized to
    two decimals (the dead zone below 0.1 is excluded by construction)."""
    k = int(rng.choice([1, 2, 3], p=config.op_count_weights))
    names = rng.choice(config.op_names, size=k, replace=False)
    ops = []
    for name in names:
        mag = rng.uniform(config.value_low, config.value_high)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        ops.append(EditOp(str(name), float(np.round(sign * mag, 2))))
    return EditSpec(tuple(ops))


def gen_command(spec: EditSpec, seed: int) -> str:
    """Vague textual description: one pooled phrase per op, keyed by
    (name, sign), joined by "and" in a random order, optional style prefix.
    Never contains digits or operation values."""
    rng = np.random.Generator(np.random.PCG64(seed))
    phrases = []
    for op in spec.ops:
        pool = PHRASE_POOLS[(op.name, 1 if op.value > 0 else -1)]
        phrases.append(pool[int(rng.integers(len(pool)))])
    order = rng.permutation(len(phrases))
    prefix = STYLE_PREFIXES[int(rng.integers(len(STYLE_PREFIXES)))]
    return prefix + " and ".join(phrases[i] for i in order)


def gen_record(global_seed: int, index: int, config: GenConfig = GenConfig(),
               split: str = "train") -> TripletRecord:
    """Materialize record `index`: images are regenerable from the seed, so
    only the seed and the spec are stored on the record itself."""
    rec_seed = stable_hash(global_seed, index)
    rng = np.random.Generator(np.random.PCG64(stable_hash(rec_seed, "spec")))
    spec = gen_spec(rng, config)
    command = gen_command(spec, stable_hash(rec_seed, "command"))
    rid = f"r{index:06d}"
    return TripletRecord(
        id=rid,
        seed=rec_seed,
        spec=spec,
        command=command,
        split=split,
        source_png=f"images/{rid}_src.png",
        edited_png=f"images/{rid}_edit.png",
    )


def split_assign(n: int, seed: int) -> list[str]:
    """Disjoint, exhaustive 80/10/10 split labels via a seeded permutation."""
    if n < 10:
        raise ValueError(f"need at least 10 records to split, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    n_train = int(np.floor(0.8 * n))
    n_val = int(np.floor(0.1 * n))
    labels = [""] * n
    for pos, idx in enumerate(perm):
        if pos < n_train:
            labels[idx] = "train"
        elif pos < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return labels


def build_manifest(global_seed: int, n: int, config: GenConfig = GenConfig()) -> Manifest:
    """Generate an in-memory manifest of n records with splits assigned."""
    labels = split_assign(n, stable_hash(global_seed, "split"))
    records = [gen_record(global_seed, i, config, split=labels[i]) for i in range(n)]
    return Manifest(
        records=records,
        generator_version=GENERATOR_VERSION,
        global_seed=global_seed,
        op_vocabulary=config.op_names,
    )


def _record_line(rec: TripletRecord) -> str:
    # Hand-assembled so op values serialize with exactly two decimals.
    ops = ", ".join(
        '{"name": %s, "value": %s}' % (json.dumps(op.name), format_value(op.value))
        for op in rec.spec.ops
    )
    return (
        '{"id": %s, "seed": %d, "ops": [%s], "command": %s, "split": %s, '
        '"source_png": %s, "edited_png": %s, "answer_text": %s}'
        % (
            json.dumps(rec.id),
            rec.seed,
            ops,
            json.dumps(rec.command),
            json.dumps(rec.split),
            json.dumps(rec.source_png),
            json.dumps(rec.edited_png),
            json.dumps(rec.answer_text),
        )
    )


def write_manifest(manifest: Manifest, directory: str) -> None:
    """Write manifest.jsonl + meta.json + one PNG pair per record."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(_record_line(rec) + "\n")
    meta = {
        "generator_version": manifest.generator_version,
        "global_seed": manifest.global_seed,
        "op_vocabulary": list(manifest.op_vocabulary),
        "n_records": len(manifest.records),
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for rec in manifest.records:
        source = imgedit.synth_image(rec.seed)
        edited = imgedit.apply_spec(source, rec.spec)
        imgedit.write_png(source, os.path.join(directory, rec.source_png))
        imgedit.write_png(edited, os.path.join(directory, rec.edited_png))
    manifest.root = directory


def _parse_record(line: str, lineno: int) -> TripletRecord:
    try:
        obj = json.loads(line)
        ops = tuple(EditOp(o["name"], float(o["value"])) for o in obj["ops"])
        return TripletRecord(
            id=obj["id"],
            seed=int(obj["seed"]),
            spec=EditSpec(ops),
            command=obj["command"],
            split=obj["split"],
            source_png=obj["source_png"],
            edited_png=obj["edited_png"],
        )
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"malformed manifest line {lineno}: {exc}") from exc


def read_manifest(directory: str, verify: bool = False) -> Manifest:
    """Load a manifest directory; with verify=True, recompute both images of
    every record from its seed and require byte equality with the stored PNGs.
    """
    path = os.path.join(directory, "manifest.jsonl")
    if not os.path.isfile(path):
        raise ManifestError(f"missing manifest file: {path}")
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isfile(meta_path):
        raise ManifestError(f"missing manifest meta file: {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            records.append(_parse_record(line, lineno))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate record ids in manifest")
    manifest = Manifest(
        records=records,
        generator_version=meta["generator_version"],
        global_seed=int(meta["global_seed"]),
        op_vocabulary=tuple(meta["op_vocabulary"]),
        root=directory,
    )
    if verify:
        verify_manifest(manifest)
    return manifest


def verify_manifest(manifest: Manifest) -> None:
    """Integrity check: stored PNG bytes must equal the regeneration
    (source from seed, edited = apply_spec(source, spec)) after quantization.
    """
    if manifest.root is None:
        return
    for rec in manifest.records:
        source = imgedit.synth_image(rec.seed)
        edited = imgedit.apply_spec(source, rec.spec)
        for tag, img, rel in (
            ("source", source, rec.source_png),
            ("edited", edited, rec.edited_png),
        ):
            path = os.path.join(manifest.root, rel)
            if not os.path.isfile(path):
                raise IntegrityError(f"record {rec.id}: missing {tag} image {rel}")
            stored = imgedit.read_png_bytes(path)
            if not np.array_equal(stored, imgedit.to_bytes(img)):
                raise IntegrityError(
                    f"record {rec.id}: {tag} image does not match regeneration"
                )

"""Synthetic referring-grid world: scenes, expressions, rendering and JSONL storage.

An 8x8 grid of 8-pixel cells holds 2-6 objects, at most one per cell. Each
example pairs a scene seed with an expression whose referent is unique under
the grammar below. Images are never stored; they are re-rendered from seeds.

Grammar (cell coordinates are (row, col), row 0 at the top)::

    attribute:  <color> <shape>
    spatial:    <color> <shape> <relation> <color> <shape>
    relation:   left of | right of | above | below
    count:      how many <color> <shape>        (answer 0..5)
    exist:      is there a <color> <shape>      (answer yes | no)

``A rel B`` denotes the objects matching A for which some object matching B
satisfies the relation under strict comparison: "left of" means a smaller
column, "above" a smaller row.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from itertools import product
from typing import Iterable, Iterator, Sequence

import numpy as np

from .net import ANSWERS

GRID = 8
CELL_PX = 8
IMAGE_PX = GRID * CELL_PX
VERSION = 1
BACKGROUND = 0.1
MAX_TRIES = 1000

SHAPES = ("square", "disc", "triangle")
# RGB in [0, 1]; chosen to be far apart from each other and from the background
COLORS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.15),
}
RELATIONS = ("left of", "right of", "above", "below")
LOCATE_KINDS = ("attribute", "spatial")
ANSWER_KINDS = ("count", "exist")


class GenerationError(RuntimeError):
    pass


class NoReferent(ValueError):
    """The scene admits no unique referent of the requested kind."""


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Obj:
    cell: int
    shape: str
    color: str

    @property
    def row(self) -> int:
        return self.cell // GRID

    @property
    def col(self) -> int:
        return self.cell % GRID

    @property
    def attrs(self) -> tuple[str, str]:
        return self.color, self.shape


@dataclass(frozen=True)
class Scene:
    objects: tuple[Obj, ...]
    seed: int

    def matching(self, color: str, shape: str) -> list[Obj]:
        return [o for o in self.objects if o.attrs == (color, shape)]


@dataclass(frozen=True)
class Example:
    expression: str
    target: int  # cell index for locate kinds, answer index for question kinds
    seed: int
    kind: str
    split: str

    @property
    def scene(self) -> Scene:
        return gen_scene(self.seed)

    @property
    def image(self) -> np.ndarray:
        return render(self.scene)


def vocabulary_tokens() -> list[str]:
    """Every word the grammar can emit, in a fixed order."""
    words = list(COLORS) + list(SHAPES)
    for rel in RELATIONS:
        words += [w for w in rel.split() if w not in words]
    words += ["how", "many", "is", "there", "a"]
    return words


# scenes

def _unique_attrs(objects: Sequence[Obj]) -> list[Obj]:
    counts: dict[tuple[str, str], int] = {}
    for o in objects:
        counts[o.attrs] = counts.get(o.attrs, 0) + 1
    return [o for o in objects if counts[o.attrs] == 1]


def gen_scene(seed: int) -> Scene:
    """Deterministic per seed; resamples until some object is uniquely describable."""
    rng = np.random.default_rng([VERSION, seed])
    colors = list(COLORS)
    for _ in range(MAX_TRIES):
        n = int(rng.integers(2, 7))
        cells = sorted(int(c) for c in rng.choice(GRID * GRID, size=n, replace=False))
        objs = tuple(Obj(c, SHAPES[int(rng.integers(len(SHAPES)))], colors[int(rng.integers(len(colors)))])
                     for c in cells)
        if _unique_attrs(objs):
            return Scene(objs, seed)
    raise GenerationError(f"seed {seed}: no describable scene after {MAX_TRIES} tries")


def _holds(rel: str, a: Obj, b: Obj) -> bool:
    if rel == "left of":
        return a.col < b.col
    if rel == "right of":
        return a.col > b.col
    if rel == "above":
        return a.row < b.row
    if rel == "below":
        return a.row > b.row
    raise ValueError(f"unknown relation {rel!r}")


def _tied(rel: str, a: Obj, b: Obj) -> bool:
    return a.col == b.col if rel in ("left of", "right of") else a.row == b.row


def parse_expression(expr: str) -> tuple:
    """Split an expression into (kind, *fields); raises ValueError if outside the grammar."""
    words = expr.split()
    if len(words) == 2 and words[0] in COLORS and words[1] in SHAPES:
        return ("attribute", words[0], words[1])
    if len(words) >= 5 and words[0] in COLORS and words[1] in SHAPES:
        rel = " ".join(words[2:-2])
        if rel in RELATIONS and words[-2] in COLORS and words[-1] in SHAPES:
            return ("spatial", words[0], words[1], rel, words[-2], words[-1])
    if len(words) == 4 and words[:2] == ["how", "many"] and words[2] in COLORS and words[3] in SHAPES:
        return ("count", words[2], words[3])
    if len(words) == 5 and words[:3] == ["is", "there", "a"] and words[3] in COLORS and words[4] in SHAPES:
        return ("exist", words[3], words[4])
    raise ValueError(f"expression outside the grammar: {expr!r}")


def referents(scene: Scene, expr: str) -> list[int]:
    """Brute-force semantics: cells of every object the expression denotes."""
    parsed = parse_expression(expr)
    if parsed[0] == "attribute":
        return [o.cell for o in scene.matching(*parsed[1:])]
    if parsed[0] == "spatial":
        _, c1, s1, rel, c2, s2 = parsed
        return [a.cell for a in scene.matching(c1, s1)
                if any(b is not a and _holds(rel, a, b) for b in scene.matching(c2, s2))]
    raise ValueError(f"{parsed[0]} questions have answers, not referents")


def answer(scene: Scene, expr: str) -> str:
    kind, color, shape = parse_expression(expr)
    n = len(scene.matching(color, shape))
    if kind == "count":
        return str(n)
    if kind == "exist":
        return "yes" if n else "no"
    raise ValueError(f"{kind} expressions have referents, not answers")


def _spatial_candidates(scene: Scene) -> list[tuple[str, int]]:
    out = []
    unique = _unique_attrs(scene.objects)
    for t in scene.objects:
        peers = scene.matching(*t.attrs)
        # a spatial expression must need its relation
        if len(peers) < 2:
            continue
        for lm in unique:
            if lm is t:
                continue
            for rel in RELATIONS:
                if any(_tied(rel, p, lm) for p in peers):
                    continue
                expr = f"{t.color} {t.shape} {rel} {lm.color} {lm.shape}"
                if referents(scene, expr) == [t.cell]:
                    out.append((expr, t.cell))
    return out


def gen_expression(scene: Scene, kind: str, rng: np.random.Generator) -> tuple[str, int]:
    """Pick an expression of ``kind`` with a unique referent; raises NoReferent if none exists."""
    if kind == "attribute":
        cands = [(f"{o.color} {o.shape}", o.cell) for o in _unique_attrs(scene.objects)]
    elif kind == "spatial":
        cands = _spatial_candidates(scene)
    else:
        raise ValueError(f"unknown expression kind {kind!r}")
    if not cands:
        raise NoReferent(f"scene {scene.seed} has no unique {kind} referent")
    expr, cell = cands[int(rng.integers(len(cands)))]
    if referents(scene, expr) != [cell]:
        raise AssertionError(f"ambiguous expression {expr!r} in scene {scene.seed}")
    return expr, cell


def gen_question(scene: Scene, kind: str, rng: np.random.Generator) -> tuple[str, str]:
    """A count or exist question about a random color/shape pair, with its answer."""
    color, shape = rng.choice(list(COLORS)), rng.choice(SHAPES)
    if kind == "exist" and rng.random() < 0.5:
        color, shape = scene.objects[int(rng.integers(len(scene.objects)))].attrs
    if kind == "count":
        expr = f"how many {color} {shape}"
    elif kind == "exist":
        expr = f"is there a {color} {shape}"
    else:
        raise ValueError(f"unknown question kind {kind!r}")
    return expr, answer(scene, expr)


# rendering

def _masks() -> dict[str, np.ndarray]:
    full = np.ones((6, 6), dtype=bool)
    disc = full.copy()
    disc[[0, 0, -1, -1], [0, -1, 0, -1]] = False
    yy, xx = np.mgrid[:6, :6]
    return {"square": full, "disc": disc, "triangle": xx <= yy}


SHAPE_MASKS = _masks()


def render(scene: Scene) -> np.ndarray:
    """(64, 64, 3) float32; each object paints a 6x6 box inset 1 px in its cell."""
    img = np.full((IMAGE_PX, IMAGE_PX, 3), BACKGROUND, dtype=np.float32)
    for o in scene.objects:
        r0, c0 = o.row * CELL_PX + 1, o.col * CELL_PX + 1
        patch = img[r0:r0 + 6, c0:c0 + 6]
        patch[SHAPE_MASKS[o.shape]] = COLORS[o.color]
    return img


# datasets

def _example_for(seed: int, kind: str, split: str) -> Example | None:
    scene = gen_scene(seed)
    rng = np.random.default_rng([VERSION, seed, 1])
    if kind in ANSWER_KINDS:
        expr, ans = gen_question(scene, kind, rng)
        return Example(expr, ANSWERS.index(ans), seed, kind, split)
    try:
        expr, cell = gen_expression(scene, kind, rng)
    except NoReferent:
        return None
    return Example(expr, cell, seed, kind, split)


def generate(n: int, split: str, first_seed: int, kinds: Sequence[str] = LOCATE_KINDS) -> tuple[list[Example], int]:
    """``n`` examples cycling through ``kinds``; returns them and the next unused seed.

    Scenes that cannot host the requested kind are skipped, so each seed is
    used by at most one example.
    """
    out = []
    seed = first_seed
    while len(out) < n:
        ex = _example_for(seed, kinds[len(out) % len(kinds)], split)
        seed += 1
        if ex is not None:
            out.append(ex)
    return out, seed


def make_splits(n_train: int, n_test: int, seed: int = 0,
                kinds: Sequence[str] = LOCATE_KINDS) -> dict[str, list[Example]]:
    """Train and test draw from consecutive, non-overlapping seed ranges."""
    base = seed * 100_000_000
    train, nxt = generate(n_train, "train", base, kinds)
    test, _ = generate(n_test, "test", nxt, kinds)
    return {"train": train, "test": test}


def header() -> dict:
    return {"cell_px": CELL_PX, "grid": GRID, "version": VERSION}


def write_jsonl(examples: Iterable[Example], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header(), sort_keys=True) + "\n")
        for ex in examples:
            f.write(json.dumps(asdict(ex), sort_keys=True) + "\n")


_FIELDS = {"expression": str, "target": int, "seed": int, "kind": str, "split": str}


def read_jsonl(path: str | os.PathLike) -> list[Example]:
    out = []
    lineno = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if lineno == 1:
                if not isinstance(rec, dict) or rec.get("version") != VERSION:
                    raise DatasetError(f"{path}:1: unsupported dataset version {rec.get('version') if isinstance(rec, dict) else rec!r}")
                if rec.get("grid") != GRID or rec.get("cell_px") != CELL_PX:
                    raise DatasetError(f"{path}:1: grid/cell size mismatch")
                continue
            if not isinstance(rec, dict) or set(rec) != set(_FIELDS):
                raise DatasetError(f"{path}:{lineno}: expected fields {sorted(_FIELDS)}")
            for k, typ in _FIELDS.items():
                if not isinstance(rec[k], typ) or isinstance(rec[k], bool):
                    raise DatasetError(f"{path}:{lineno}: field {k!r} must be {typ.__name__}")
            out.append(Example(**rec))
    if lineno == 0:
        raise DatasetError(f"{path}: empty file, missing header")
    return out


def iter_images(examples: Sequence[Example]) -> Iterator[np.ndarray]:
    for ex in examples:
        yield render(gen_scene(ex.seed))


def render_all(examples: Sequence[Example]) -> np.ndarray:
    out = np.empty((len(examples), IMAGE_PX, IMAGE_PX, 3), dtype=np.float32)
    for i, img in enumerate(iter_images(examples)):
        out[i] = img
    return out


def check_labels(examples: Iterable[Example]) -> int:
    """Re-derive every label from scratch; returns the count checked, raises on a mismatch."""
    n = 0
    for ex in examples:
        scene = gen_scene(ex.seed)
        if ex.kind in ANSWER_KINDS:
            ok = ANSWERS[ex.target] == answer(scene, ex.expression)
        else:
            ok = referents(scene, ex.expression) == [ex.target]
        if not ok:
            raise DatasetError(f"label mismatch for seed {ex.seed}: {ex.expression!r}")
        n += 1
    return n


def combos() -> list[tuple[str, str]]:
    return list(product(COLORS, SHAPES))

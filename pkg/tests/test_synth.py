import json
import re
from collections import Counter

import numpy as np
import pytest

from laconv import synth
from laconv.synth import (BACKGROUND, CELL_PX, COLORS, GRID, Obj, Scene, gen_expression, gen_scene, make_splits,
                          read_jsonl, render, write_jsonl)

N_PROPERTY = 10_000


@pytest.fixture(scope="module")
def splits():
    return make_splits(N_PROPERTY, 2000, seed=0)


def decode(img):
    """Recover (row, col, color, shape) for every object from pixels alone."""
    palette = {name: np.array(rgb, dtype=np.float32) for name, rgb in COLORS.items()}
    objs = []
    for r in range(GRID):
        for c in range(GRID):
            box = img[r * CELL_PX + 1:r * CELL_PX + 7, c * CELL_PX + 1:c * CELL_PX + 7]
            probe = box[2, 0]  # filled by every shape
            if np.allclose(probe, BACKGROUND):
                continue
            color = next(n for n, rgb in palette.items() if np.array_equal(probe, rgb))
            tl = not np.allclose(box[0, 0], BACKGROUND)
            tr = not np.allclose(box[0, 5], BACKGROUND)
            shape = "disc" if not tl else ("square" if tr else "triangle")
            objs.append((r, c, color, shape))
    return objs


SPATIAL = re.compile(r"^(\w+) (\w+) (left of|right of|above|below) (\w+) (\w+)$")


def oracle(objs, expr):
    """Cells denoted by ``expr`` in a decoded scene."""
    m = SPATIAL.match(expr)
    if m is None:
        color, shape = expr.split()
        return [r * GRID + c for r, c, co, sh in objs if (co, sh) == (color, shape)]
    c1, s1, rel, c2, s2 = m.groups()
    test = {"left of": lambda a, b: a[1] < b[1], "right of": lambda a, b: a[1] > b[1],
            "above": lambda a, b: a[0] < b[0], "below": lambda a, b: a[0] > b[0]}[rel]
    return [a[0] * GRID + a[1] for a in objs if a[2:] == (c1, s1)
            and any(b is not a and b[2:] == (c2, s2) and test(a, b) for b in objs)]


def test_scene_determinism_and_size():
    assert gen_scene(42) == gen_scene(42)
    counts = set()
    for seed in range(N_PROPERTY):
        sc = gen_scene(seed)
        cells = [o.cell for o in sc.objects]
        assert len(cells) == len(set(cells))
        counts.add(len(cells))
    assert counts == {2, 3, 4, 5, 6}


def test_rejection_cap(monkeypatch):
    monkeypatch.setattr(synth, "MAX_TRIES", 0)
    with pytest.raises(synth.GenerationError):
        gen_scene(0)


def test_attribute_uniqueness_examples():
    one = Scene((Obj(9, "square", "red"),  Obj(30, "disc", "blue"), Obj(31, "disc", "blue")), 0)
    rng = np.random.default_rng(0)
    assert gen_expression(one, "attribute", rng) == ("red square", 9)
    scene = Scene((Obj(1, "disc", "blue"), Obj(2, "disc", "blue"), Obj(3, "triangle", "green")), 0)
    for _ in range(20):
        assert gen_expression(scene, "attribute", rng) == ("green triangle", 3)
    with pytest.raises(synth.NoReferent):
        gen_expression(Scene((Obj(1, "disc", "blue"), Obj(2, "disc", "blue")), 0), "attribute", rng)


def test_spatial_needs_its_relation():
    scene = Scene((Obj(0, "disc", "blue"), Obj(7, "disc", "blue"), Obj(3, "square", "red")), 0)
    expr, cell = gen_expression(scene, "spatial", np.random.default_rng(0))
    assert expr in ("blue disc left of red square", "blue disc right of red square")
    assert cell == (0 if "left" in expr else 7)


def test_labels_agree_with_pixel_oracle(splits):
    exs = splits["train"]
    assert len(exs) == N_PROPERTY
    for ex in exs:
        assert oracle(decode(render(gen_scene(ex.seed))), ex.expression) == [ex.target], ex
    assert synth.check_labels(exs) == N_PROPERTY


def test_class_balance(splits):
    attr = [ex for ex in splits["train"] if ex.kind == "attribute"]
    counts = Counter(tuple(ex.expression.split()) for ex in attr)
    for combo in synth.combos():
        assert counts[combo] / len(attr) >= 0.05, combo


def test_kinds_alternate(splits):
    kinds = Counter(ex.kind for ex in splits["train"])
    assert kinds == {"attribute": N_PROPERTY // 2, "spatial": N_PROPERTY // 2}


def test_splits_disjoint(splits):
    train = {(e.seed, e.expression) for e in splits["train"]}
    test = {(e.seed, e.expression) for e in splits["test"]}
    assert not train & test
    assert not {e.seed for e in splits["train"]} & {e.seed for e in splits["test"]}
    assert {e.split for e in splits["train"]} == {"train"} and {e.split for e in splits["test"]} == {"test"}


def test_render_examples():
    scene = Scene((Obj(0, "square", "red"), Obj(1, "disc", "red")), 0)
    img = render(scene)
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    np.testing.assert_array_equal(img[8:16, 8:16], np.float32(BACKGROUND))
    sq, disc = img[1:7, 1:7], img[1:7, 9:15]
    diff = np.argwhere((sq != disc).any(-1))
    assert sorted(map(tuple, diff)) == [(0, 0), (0, 5), (5, 0), (5, 5)]
    assert render(scene).tobytes() == img.tobytes()
    tri = render(Scene((Obj(0, "triangle", "blue"),), 0))[1:7, 1:7]
    filled = ~np.isclose(tri, BACKGROUND).all(-1)
    np.testing.assert_array_equal(filled, np.tril(np.ones((6, 6), bool)))


def test_round_trip(tmp_path, splits):
    exs = splits["test"][:100]
    path = tmp_path / "d.jsonl"
    write_jsonl(exs, path)
    assert read_jsonl(path) == exs
    assert json.loads(path.read_text().splitlines()[0]) == {"cell_px": 8, "grid": 8, "version": 1}
    assert np.array_equal(synth.render_all(read_jsonl(path)), synth.render_all(exs))


def test_version_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"cell_px": 8, "grid": 8, "version": 2}\n')
    with pytest.raises(synth.DatasetError, match="version"):
        read_jsonl(path)


@pytest.mark.parametrize("line,match", [("{not json", ":2: malformed"), ('{"expression": "red disc"}', ":2: expected"),
                                        ('{"expression": "red disc", "target": "3", "seed": 1, "kind": "attribute", '
                                         '"split": "train"}', ":2: field 'target'")])
def test_malformed_line_reports_number(tmp_path, line, match):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(synth.header()) + "\n" + line + "\n")
    with pytest.raises(synth.DatasetError, match=match):
        read_jsonl(path)


def test_empty_file(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("")
    with pytest.raises(synth.DatasetError):
        read_jsonl(path)


def test_questions_have_consistent_answers():
    splits = make_splits(200, 50, seed=3, kinds=synth.ANSWER_KINDS)
    assert synth.check_labels(splits["train"] + splits["test"]) == 250
    assert {e.kind for e in splits["train"]} == {"count", "exist"}

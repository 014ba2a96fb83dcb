"""Command-line entry point: ``laconv {gen-data,train,eval,cost,inspect}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error, 4 numeric failure.
Options may also come from ``--config-file F`` (a JSON object keyed by option
name); explicit flags win over the file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, cost, synth
from . import tensor as T
from .net import ConfigError, LaConvNet, ablate, build
from .text import Vocabulary, tokenize
from .train import Dataset, TrainConfig, evaluate, fit, is_question_set, load_model

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laconv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config-file", help="JSON file of option defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--no-timestamp", action="store_true", help="omit wall-clock stamps from logs")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    g.add_argument("--out")
    g.add_argument("--n-train", type=int, default=10000)
    g.add_argument("--n-test", type=int, default=2000)
    g.add_argument("--task", choices=("locate", "answer"), default="locate",
                   help="referring expressions (locate) or count/exist questions (answer)")

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--config", default="toy")
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--warmup", type=int, default=3, help="warmup epochs")
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--eval-interval", type=int, default=1)
    t.add_argument("--clip", type=float, default=5.0)
    t.add_argument("--groups", type=int, help="override groups in every stage")
    t.add_argument("--kernel", type=int, help="override kernel size in every stage")
    t.add_argument("--no-packing", action="store_true")
    t.add_argument("--language-only", action="store_true")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")

    c = common(sub.add_parser("cost", help="parameter and MAC table"))
    c.add_argument("--config", default="toy")
    c.add_argument("--resolution", type=int)
    c.add_argument("--text-len", type=int, default=8)
    c.add_argument("--vocab-size", type=int, default=len(synth.vocabulary_tokens()) + 2)
    c.add_argument("--csv")

    i = common(sub.add_parser("inspect", help="dump affinity, condition and kernels of one layer"))
    i.add_argument("--checkpoint")
    i.add_argument("--expression")
    i.add_argument("--image-seed", type=int)
    i.add_argument("--layer", default="0.0", help="stage.block, e.g. 1.0 or stage1.block0")
    i.add_argument("--out")
    return p


REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "checkpoint"),
    "cost": (),
    "inspect": ("checkpoint", "expression", "image_seed", "out"),
}


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = _parser()
    args = parser.parse_args(argv)
    if args.config_file:
        try:
            with open(args.config_file) as f:
                file_opts = json.load(f)
        except OSError as e:
            raise OSError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_opts, dict):
            raise UsageError("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
        unknown = sorted(set(opts) - known)
        if unknown:
            raise UsageError(f"unknown option(s) in config file: {', '.join(unknown)}")
        sub.set_defaults(**opts)
        args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")
    return args


def cmd_gen_data(args) -> None:
    kinds = synth.LOCATE_KINDS if args.task == "locate" else synth.ANSWER_KINDS
    splits = synth.make_splits(args.n_train, args.n_test, args.seed, kinds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, exs in splits.items():
        synth.write_jsonl(exs, out / f"{name}.jsonl")
    vocab = Vocabulary(synth.vocabulary_tokens())
    (out / "vocab.json").write_text(vocab.to_json() + "\n")
    print(f"wrote {args.n_train} train / {args.n_test} test examples to {out}")


def _read_split(data_dir: str, split: str):
    path = Path(data_dir) / f"{split}.jsonl"
    return synth.read_jsonl(path)


def _read_vocab(data_dir: str) -> Vocabulary:
    path = Path(data_dir) / "vocab.json"
    if path.exists():
        return Vocabulary.from_json(path.read_text())
    return Vocabulary(synth.vocabulary_tokens())


def cmd_train(args) -> None:
    train_ex = _read_split(args.data, "train")
    test_ex = _read_split(args.data, "test")
    vocab = _read_vocab(args.data)
    cfg = ablate(build(args.config), groups=args.groups, kernel=args.kernel,
                 no_packing=args.no_packing, language_only=args.language_only)
    if is_question_set(train_ex):
        cfg = replace(cfg, head="answer")
    if cfg.resolution != synth.IMAGE_PX:
        raise ConfigError(f"config {cfg.name} expects {cfg.resolution}px images; the dataset is {synth.IMAGE_PX}px")
    tcfg = TrainConfig(lr0=args.lr, epochs=args.epochs, warmup_epochs=args.warmup, batch_size=args.batch_size,
                       seed=args.seed, eval_interval=args.eval_interval, checkpoint_dir=args.out, clip=args.clip)
    train, test = Dataset(train_ex, vocab, cfg.max_len), Dataset(test_ex, vocab, cfg.max_len)
    model = LaConvNet(cfg, len(vocab), seed=args.seed)
    fit(model, vocab, train, test, tcfg, log=lambda m: print(m, flush=True), timestamps=not args.no_timestamp)


def cmd_eval(args) -> None:
    model, vocab, _ = load_model(args.checkpoint)
    data = Dataset(_read_split(args.data, args.split), vocab, model.cfg.max_len)
    print(json.dumps(evaluate(model, data), sort_keys=True))


def cmd_cost(args) -> None:
    cfg = build(args.config)
    rep = cost.report(cfg, text_len=args.text_len, vocab_size=args.vocab_size, resolution=args.resolution)
    print(rep.table())
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())


def parse_layer(spec: str) -> tuple[int, int]:
    s = spec.replace("stage", "").replace("block", "")
    try:
        i, j = (int(p) for p in s.split("."))
    except ValueError:
        raise UsageError(f"--layer must look like 1.0 or stage1.block0, got {spec!r}") from None
    return i, j


def capture_maps(model: LaConvNet, image: np.ndarray, ids, stage: int, block: int):
    """Run the backbone up to one block and return that block's LaConv maps."""
    cfg = model.cfg
    if not (0 <= stage < len(cfg.stages) and 0 <= block < cfg.stages[stage].blocks):
        raise UsageError(f"layer {stage}.{block} does not exist in {cfg.name}")
    y = model.encode(ids)
    x = T.linear(T.Tensor(image[None]), model.stem_w, model.stem_b)
    for i, st in enumerate(model.stages):
        x = T.max_pool2x2(x)
        if hasattr(st, "proj_w"):
            x = T.linear(x, st.proj_w, st.proj_b)
        for j, blk in enumerate(st.blocks):
            if (i, j) == (stage, block):
                return blk.conv.maps(x, y)
            x = blk(x, y)
    raise AssertionError("unreachable")


def cmd_inspect(args) -> None:
    model, vocab, _ = load_model(args.checkpoint)
    stage, block = parse_layer(args.layer)
    ids = [tokenize(args.expression, vocab)]
    image = synth.render(synth.gen_scene(args.image_seed))
    maps = capture_maps(model, image, ids, stage, block)
    cond, kernels = maps.full()
    st = model.cfg.stages[stage]
    tensors = {"condition": cond[0], "kernels": kernels[0]}
    if maps.affinity is not None:
        tensors["affinity"] = maps.affinity.data[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"expression": args.expression, "image_seed": args.image_seed, "layer": f"stage{stage}.block{block}",
            "kernel": st.kernel, "groups": st.groups, "packing": st.packing}
    checkpoint.save(out / "maps.lckp", tensors, meta)
    h, w, _ = kernels[0].shape
    per = kernels[0].reshape(h * w, st.kernel * st.kernel, st.groups)
    norms = np.sqrt(np.square(per.astype(np.float64)).sum(axis=1))
    with open(out / "kernel_norms.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["position", "group", "kernel_l2"])
        for pos in range(h * w):
            for grp in range(st.groups):
                wr.writerow([pos, grp, f"{norms[pos, grp]:.6g}"])
    print(f"wrote {', '.join(sorted(tensors))} for layer {meta['layer']} to {out}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "cost": cmd_cost, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"laconv: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"laconv: error: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"laconv: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, synth.DatasetError, checkpoint.CheckpointError) as e:
        print(f"laconv: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as e:
        print(f"laconv: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())

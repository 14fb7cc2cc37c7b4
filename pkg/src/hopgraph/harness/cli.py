"""Command-line entry point.

Every subcommand takes ``--seed``, ``--config`` (flat ``key = value`` file)
and ``--out``. Explicit flags beat config-file values, which beat defaults.
Each run writes ``manifest.json`` into its output directory.

Exit codes: 0 success, 1 validation or usage error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from hopgraph import _accel
from hopgraph.encoder import EmbeddingConfig, EncoderConfig, KernelKind, encoder_forward, init_encoder_params, make_input
from hopgraph.errors import ConfigError, HopgraphError, NumericError, ValidationError
from hopgraph.graph import add_skip_edges, build_sequence, compute_distance_matrix, graph_from_dict, graph_to_dict
from hopgraph.io import load_checkpoint, read_config, save_checkpoint, write_manifest, write_tsv
from hopgraph.numerics.optim import scaled_decay_epochs

log = logging.getLogger("hopgraph")

ENV_OUT = "HOPGRAPH_OUT"


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Opt:
    name: str
    kind: Callable
    default: object
    help: str


def _hops(value: str):
    if str(value).lower() in ("none", "no-hop", "inf"):
        return None
    h = int(value)
    if h < 1:
        raise ConfigError(f"hop limit must be >= 1 or 'none', got {value}")
    return h


def _int_list(value) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v.strip())


def _str_list(value) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


def _path(value):
    return None if value in (None, "") else Path(value)


MODEL_OPTS = (
    Opt("hidden", int, 64, "hidden width"),
    Opt("layers", int, 2, "encoder blocks"),
    Opt("heads", int, 4, "attention heads"),
    Opt("hops", _hops, 3, "hop limit h, or 'none' for unmasked attention"),
    Opt("kernel", KernelKind.parse, KernelKind.RATIONAL_QUADRATIC, "rq | gaussian | identity | off"),
)

COMMANDS = {
    "gen-data": (
        Opt("samples", int, 500, "caption/graph pairs"),
        Opt("choices", int, 0, "multiple-choice samples to write as well"),
        Opt("entity_classes", int, 12, "entity classes"),
        Opt("predicate_classes", int, 8, "predicate classes"),
        Opt("feature_dim", int, 16, "visual feature width"),
        Opt("label_rule", str, "NEIGHBOR_DETERMINED", "NEIGHBOR_DETERMINED | RANDOM"),
        Opt("template_set", str, "basic", "basic | pronoun"),
    ),
    "pretrain": (
        Opt("corpus", _path, None, "corpus .jsonl (default: the shipped toy corpus)"),
        Opt("epochs", int, 20, "training epochs"),
        Opt("ratio", float, 0.3, "mask ratio"),
        Opt("lr", float, 0.05, "initial learning rate"),
        Opt("decay_epochs", _int_list, None, "0-based decay epochs (default: 70%% and 90%% of epochs)"),
        Opt("batch_size", int, 1, "samples per update"),
        Opt("holdout", float, 0.1, "held-out fraction"),
        Opt("clip_norm", float, 5.0, "global gradient-norm clip (0 disables)"),
        Opt("kernel_lr_scale", float, 50.0, "rate multiplier for kernel scalars"),
    ) + MODEL_OPTS,
    "train": (
        Opt("samples", int, 200, "training choice samples"),
        Opt("val_samples", int, 100, "held-out choice samples"),
        Opt("data_seed", int, 0, "seed of the synthetic world (0 matches the shipped corpus)"),
        Opt("epochs", int, 20, "training epochs"),
        Opt("lr", float, 0.05, "initial learning rate"),
        Opt("decay_epochs", _int_list, None, "0-based decay epochs (default: 70%% and 90%% of epochs)"),
        Opt("momentum", float, 0.0, "heavy-ball momentum"),
        Opt("clip_norm", float, 5.0, "global gradient-norm clip (0 disables)"),
        Opt("kernel_lr_scale", float, 20.0, "rate multiplier for kernel scalars"),
        Opt("checkpoint", _path, None, "encoder checkpoint to start from"),
    ) + MODEL_OPTS,
    "eval": (
        Opt("checkpoint", _path, None, "checkpoint written by train"),
        Opt("samples", int, 100, "choice samples to score"),
        Opt("data_seed", int, 0, "seed of the synthetic world (0 matches the shipped corpus)"),
    ),
    "ablate-hops": (
        Opt("seeds", _int_list, (0, 1, 2, 3, 4), "comma-separated seeds"),
        Opt("cells", _str_list, ("all",), "'all' or cells like none:off,3:rq"),
        Opt("samples", int, 400, "graphs per seed"),
        Opt("epochs", int, 20, "epochs per cell"),
        Opt("lr", float, 0.05, "learning rate"),
        Opt("hidden", int, 64, "hidden width"),
        Opt("layers", int, 2, "encoder blocks"),
        Opt("heads", int, 4, "attention heads"),
        Opt("kernel_lr_scale", float, 50.0, "rate multiplier for kernel scalars"),
    ),
    "longtail": (
        Opt("seeds", _int_list, (0, 1, 2, 3, 4), "comma-separated seeds"),
        Opt("profile", str, "exponential", "exponential | balanced"),
        Opt("imbalance", float, 100.0, "head:tail count ratio"),
        Opt("head_count", int, 500, "samples of the largest class"),
        Opt("gamma", float, 2.0, "focal exponent"),
        Opt("beta", float, 0.999, "class-balancing beta"),
        Opt("epochs", int, 60, "gradient steps"),
        Opt("lr", float, 0.5, "learning rate"),
    ),
    "extract-sg": (
        Opt("input", _path, None, "directory of document .json files or a caption .tsv (default: shipped toy captions)"),
        Opt("min_frequency", int, 100, "minimum label frequency"),
        Opt("verb_stoplist", _str_list, (), "abstract verbs to drop"),
        Opt("top_k_verbs_reviewed", int, 20, "most frequent verbs the stoplist applies to"),
        Opt("allowed_roles", _str_list, ("V", "ARG0", "ARG1", "ARG2"), "semantic roles kept"),
    ),
    "dump-kernels": (
        Opt("checkpoint", _path, None, "encoder checkpoint"),
        Opt("max_distance", int, 0, "largest d to tabulate (0: the hop limit, or 6)"),
    ),
    "dump-attention": (
        Opt("checkpoint", _path, None, "encoder checkpoint"),
        Opt("corpus", _path, None, "corpus .jsonl (default: the shipped toy corpus)"),
        Opt("sample", int, 0, "index of the sample to encode"),
    ),
}

HELP = {
    "gen-data": "write a synthetic caption/graph corpus",
    "pretrain": "masked node pretraining",
    "train": "fine-tune the multiple-choice scorer",
    "eval": "score a trained multiple-choice model",
    "ablate-hops": "hop-limit by kernel ablation on the relational task",
    "longtail": "loss comparison on a long-tailed synthetic task",
    "extract-sg": "pseudo scene graphs from parsed captions",
    "dump-kernels": "tabulate learned distance kernels",
    "dump-attention": "write rescaled attention matrices for one sample",
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
    p.add_argument("--config", type=Path, default=default, help="flat key=value config file")
    p.add_argument("--out", type=Path, default=default, help=f"output directory (env {ENV_OUT})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hopgraph", description="Multihop graph attention experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        # accepted after the command too; SUPPRESS keeps a value given before it
        _global_flags(p, argparse.SUPPRESS)
        for opt in opts:
            p.add_argument("--" + opt.name.replace("_", "-"), dest=opt.name, default=None,
                           help=f"{opt.help} (default {opt.default!r})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into typed values."""
    opts = {o.name: o for o in COMMANDS[command]}
    file_values = read_config(args.config) if args.config is not None else {}
    unknown = sorted(set(file_values) - set(opts) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {}
    for name, opt in opts.items():
        raw = getattr(args, name)
        if raw is None:
            raw = file_values.get(name, opt.default)
        try:
            cfg[name] = opt.kind(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None
    seed = args.seed if args.seed is not None else int(file_values.get("seed", 0))
    return {"seed": int(seed), **cfg}


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def shipped(name: str) -> Path:
    return Path(str(resources.files("hopgraph.data").joinpath(name)))


def vocab_path(corpus: Path) -> Path:
    return corpus.with_name(corpus.name.replace(".jsonl", "") + ".vocab.txt")


def write_corpus(path: Path, samples, vocab_words) -> list:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(graph_to_dict(s.graph, s.caption), separators=(",", ":")) + "\n")
    vp = vocab_path(path)
    vp.write_text("\n".join(vocab_words) + "\n", encoding="utf-8")
    return [path, vp]


def read_corpus(path: Path) -> tuple:
    """``(graphs, captions, vocabulary words)`` from a corpus file and its vocabulary file."""
    from hopgraph.harness.synth import Vocabulary

    if not path.is_file():
        raise ValidationError(f"corpus not found: {path}")
    vp = vocab_path(path)
    if not vp.is_file():
        raise ValidationError(f"vocabulary file not found next to corpus: {vp}")
    vocab = Vocabulary(tuple(w for w in vp.read_text(encoding="utf-8").splitlines() if w))
    graphs, captions = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        graphs.append(graph_from_dict(doc))
        captions.append(doc.get("caption", ""))
    if not graphs:
        raise ValidationError(f"corpus is empty: {path}")
    return graphs, captions, vocab


def _emb_for(graphs, vocab, hidden: int) -> EmbeddingConfig:
    return EmbeddingConfig(
        hidden_dim=hidden,
        text_vocab_size=len(vocab),
        entity_class_count=1 + max(e.class_id for g in graphs for e in g.entities),
        predicate_class_count=1 + max((p.class_id for g in graphs for p in g.predicates), default=0),
        visual_feature_dim=graphs[0].entities[0].feature.shape[0],
    )


def _configs_from_meta(meta: dict) -> tuple:
    try:
        emb = EmbeddingConfig(**meta["embedding"])
        enc_raw = dict(meta["encoder"])
        enc_raw["kernel_kind"] = KernelKind.parse(enc_raw["kernel_kind"])
        enc = EncoderConfig(**enc_raw)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"checkpoint lacks model configuration ({exc})") from None
    return emb, enc


def _meta(emb: EmbeddingConfig, enc: EncoderConfig, **extra) -> dict:
    enc_d = {"layers": enc.layers, "heads": enc.heads, "hop_limit": enc.hop_limit,
             "kernel_kind": enc.kernel_kind.name, "ffn_dim": enc.ffn_dim, "share_kernels": enc.share_kernels}
    return {"embedding": emb.__dict__.copy(), "encoder": enc_d, **extra}


def _require(cfg: dict, key: str):
    if cfg.get(key) is None:
        raise ValidationError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> list:
    from hopgraph.harness.synth import SyntheticConfig, generate_choices, generate_corpus, make_world

    syn = SyntheticConfig(
        entity_class_count=cfg["entity_classes"], predicate_class_count=cfg["predicate_classes"],
        feature_dim=cfg["feature_dim"], label_rule=cfg["label_rule"], caption_template_set=cfg["template_set"],
        samples=cfg["samples"], seed=cfg["seed"],
    )
    world = make_world(syn)
    written = write_corpus(out / "corpus.jsonl", generate_corpus(syn, world), syn.vocabulary.words)
    if cfg["choices"] > 0:
        path = out / "choices.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for s in generate_choices(syn, cfg["choices"], world):
                doc = graph_to_dict(s.graph)
                doc = {"graph": doc, "question": list(s.question), "candidates": [list(c) for c in s.candidates], "gold": s.gold}
                fh.write(json.dumps(doc, separators=(",", ":")) + "\n")
        written.append(path)
    return written


def decay_schedule(cfg: dict) -> tuple:
    """Explicit decay epochs, or 14 and 18 scaled from a 20-epoch run."""
    if cfg["decay_epochs"] is not None:
        return cfg["decay_epochs"]
    return scaled_decay_epochs(cfg["epochs"])


def _encoder_cfg(cfg: dict) -> EncoderConfig:
    return EncoderConfig(layers=cfg["layers"], heads=cfg["heads"], hop_limit=cfg["hops"], kernel_kind=cfg["kernel"])


def cmd_pretrain(cfg: dict, out: Path) -> list:
    from hopgraph.numerics.optim import OptimizerConfig
    from hopgraph.pretrain import METRIC_FIELDS, PretrainConfig, derive_seed, init_mnm_heads, pretrain_loop

    corpus = cfg["corpus"] or shipped("toy_corpus.jsonl")
    graphs, captions, vocab = read_corpus(corpus)
    emb = _emb_for(graphs, vocab, cfg["hidden"])
    enc = _encoder_cfg(cfg)
    rng = np.random.default_rng(derive_seed(cfg["seed"], 51))
    params = init_encoder_params(emb, enc, rng)
    heads = init_mnm_heads(emb, rng)
    opt = OptimizerConfig(learning_rate=cfg["lr"], epochs=cfg["epochs"], decay_epochs=decay_schedule(cfg),
                          clip_norm=cfg["clip_norm"] or None)
    pcfg = PretrainConfig(ratio=cfg["ratio"], batch_size=cfg["batch_size"], holdout_fraction=cfg["holdout"],
                          kernel_lr_scale=cfg["kernel_lr_scale"])
    samples = [(g, vocab.encode(c)) for g, c in zip(graphs, captions)]
    rows = []

    def progress(row):
        rows.append(row)
        log.info("epoch %d  L_MNM %.4f  val acc sbj %.3f obj %.3f rel %.3f", row["epoch"], row["L_MNM"],
                 row["val_acc_sbj"], row["val_acc_obj"], row["val_acc_rel"])

    result = pretrain_loop(samples, emb, enc, params, heads, opt, cfg["seed"], pcfg, progress)
    return [
        write_tsv(out / "metrics.tsv", METRIC_FIELDS, result.metrics),
        save_checkpoint(out / "checkpoint.npz", {**result.params, **result.heads}, _meta(emb, enc, stage="pretrain")),
    ]


def _choice_sets(cfg: dict, train_n: int, val_n: int, feature_dim: int = 16):
    from hopgraph.harness.synth import SyntheticConfig, generate_choices, make_world

    syn = SyntheticConfig(seed=cfg["data_seed"], feature_dim=feature_dim)
    world = make_world(syn)
    train = generate_choices(syn, train_n, world, seed_offset=0) if train_n else []
    val = generate_choices(syn, val_n, world, seed_offset=1) if val_n else []
    return syn, train, val


def cmd_train(cfg: dict, out: Path) -> list:
    from hopgraph.harness.choice import finetune_choices
    from hopgraph.numerics.optim import OptimizerConfig

    syn, train, val = _choice_sets(cfg, cfg["samples"], cfg["val_samples"])
    params = None
    if cfg["checkpoint"] is not None:
        loaded, meta = load_checkpoint(cfg["checkpoint"])
        emb, enc = _configs_from_meta(meta)
        params = {k: v for k, v in loaded.items() if not k.startswith(("head.", "scorer."))}
    else:
        emb = EmbeddingConfig(hidden_dim=cfg["hidden"], text_vocab_size=len(syn.vocabulary))
        enc = _encoder_cfg(cfg)
    opt = OptimizerConfig(learning_rate=cfg["lr"], epochs=cfg["epochs"], decay_epochs=decay_schedule(cfg),
                          momentum=cfg["momentum"], clip_norm=cfg["clip_norm"] or None)
    rows = []
    result = finetune_choices(train, val, emb, enc, opt, cfg["seed"], params, kernel_lr_scale=cfg["kernel_lr_scale"],
                              progress=lambda e, a: rows.append({"epoch": e + 1, "lr": opt.lr_at(e), "train_accuracy": a}))
    return [
        write_tsv(out / "metrics.tsv", ("epoch", "lr", "train_accuracy"), rows),
        write_tsv(out / "eval.tsv", ("split", "samples", "accuracy"), [{"split": "val", "samples": len(val), "accuracy": result.val_accuracy}]),
        save_checkpoint(out / "checkpoint.npz", {**result.params, **result.scorer}, _meta(emb, enc, stage="train")),
    ]


def cmd_eval(cfg: dict, out: Path) -> list:
    from hopgraph.harness.choice import accuracy

    params, meta = load_checkpoint(_require(cfg, "checkpoint"))
    emb, enc = _configs_from_meta(meta)
    if "scorer.w" not in params:
        raise ValidationError("checkpoint has no multiple-choice scorer; run train first")
    _, _, val = _choice_sets(cfg, 0, cfg["samples"], emb.visual_feature_dim)
    scorer = {k: v for k, v in params.items() if k.startswith("scorer.")}
    acc = accuracy(val, params, scorer, emb, enc)
    return [write_tsv(out / "eval.tsv", ("split", "samples", "accuracy"), [{"split": "val", "samples": len(val), "accuracy": acc}])]


def parse_cells(spec: Sequence[str]) -> list:
    from hopgraph.harness.relational import GridCell, default_grid

    if list(spec) == ["all"]:
        return default_grid()
    cells = []
    for item in spec:
        if ":" not in item:
            raise ConfigError(f"cell {item!r} must look like <hops>:<kernel>")
        h, k = item.split(":", 1)
        cells.append(GridCell(_hops(h), KernelKind.parse(k)))
    return cells


def cmd_ablate_hops(cfg: dict, out: Path) -> list:
    from hopgraph.harness.relational import RelationalConfig, run_relational_task

    rcfg = RelationalConfig(samples=cfg["samples"], epochs=cfg["epochs"], learning_rate=cfg["lr"], hidden_dim=cfg["hidden"],
                            layers=cfg["layers"], heads=cfg["heads"], kernel_lr_scale=cfg["kernel_lr_scale"])
    cells = parse_cells(cfg["cells"])
    table = run_relational_task(cells, seeds=cfg["seeds"], cfg=rcfg,
                                progress=lambda r: log.info("%s seed %d: %.4f", r.cell.label, r.seed, r.val_accuracy))
    runs = [{"cell": r.cell.label, "seed": r.seed, "val_accuracy": r.val_accuracy, "train_loss": r.train_loss} for r in table.results]
    table_path = out / "table.tsv"
    table_path.write_text(table.to_text(), encoding="utf-8")
    return [table_path, write_tsv(out / "runs.tsv", ("cell", "seed", "val_accuracy", "train_loss"), runs)]


def cmd_longtail(cfg: dict, out: Path) -> list:
    from hopgraph.harness.longtail import LongTailConfig, LossSpec, run_longtail_study

    lcfg = LongTailConfig(imbalance=cfg["imbalance"], head_count=cfg["head_count"], epochs=cfg["epochs"], learning_rate=cfg["lr"])
    if cfg["profile"] not in ("exponential", "balanced"):
        raise ConfigError(f"profile must be exponential or balanced, got {cfg['profile']!r}")
    counts = None if cfg["profile"] == "exponential" else [cfg["head_count"]] * lcfg.classes
    g, b = cfg["gamma"], cfg["beta"]
    losses = (LossSpec("CE"), LossSpec("focal", gamma=g), LossSpec("CE+CB", beta=b), LossSpec("focal+CB", gamma=g, beta=b))
    table = run_longtail_study(lcfg, losses, cfg["seeds"], counts)
    table_path = out / "table.tsv"
    table_path.write_text(table.to_text(lcfg.classes), encoding="utf-8")
    runs = [{"loss": r.loss, "seed": r.seed, "tail_recall": r.tail_recall, "distinct_predicted": r.distinct_predicted,
             "accuracy": r.accuracy} for r in table.results]
    return [table_path, write_tsv(out / "runs.tsv", ("loss", "seed", "tail_recall", "distinct_predicted", "accuracy"), runs)]


def cmd_extract_sg(cfg: dict, out: Path) -> list:
    from hopgraph.weaksg import FilterConfig, extract, read_documents, write_outputs

    source = cfg["input"] or shipped("toy_captions.tsv")
    fcfg = FilterConfig(allowed_roles=frozenset(cfg["allowed_roles"]), min_frequency=cfg["min_frequency"],
                        verb_stoplist=frozenset(cfg["verb_stoplist"]), top_k_verbs_reviewed=cfg["top_k_verbs_reviewed"])
    result = extract(read_documents(source), fcfg)
    log.info("%d graphs kept, %d documents dropped", len(result.graphs), len(result.dropped))
    return write_outputs(result, out)


def cmd_dump_kernels(cfg: dict, out: Path) -> list:
    from hopgraph.encoder import QueryRole, kernel_param_name, kernel_value, mapped_kernel_params

    params, meta = load_checkpoint(_require(cfg, "checkpoint"))
    _, enc = _configs_from_meta(meta)
    dmax = cfg["max_distance"] or enc.hop_limit or 6
    rows = []
    for layer in range(enc.layers):
        raw = params[kernel_param_name(params, layer)].data
        mapped = mapped_kernel_params(raw)
        for head in range(raw.shape[0]):
            for role, suffix in ((QueryRole.ENTITY, "o"), (QueryRole.PREDICATE, "p")):
                row = {"layer": layer, "head": head, "role": role.name.lower(), "kernel": enc.kernel_kind.name.lower(),
                       "alpha": float(mapped[f"alpha_{suffix}"][head]), "l": float(mapped[f"l_{suffix}"][head])}
                for d in range(1, dmax + 1):
                    row[f"F{d}"] = kernel_value(d, role, raw[head], enc.kernel_kind)
                rows.append(row)
    cols = ("layer", "head", "role", "kernel", "alpha", "l") + tuple(f"F{d}" for d in range(1, dmax + 1))
    return [write_tsv(out / "kernels.tsv", cols, rows)]


def cmd_dump_attention(cfg: dict, out: Path) -> list:
    params, meta = load_checkpoint(_require(cfg, "checkpoint"))
    emb, enc = _configs_from_meta(meta)
    graphs, captions, vocab = read_corpus(cfg["corpus"] or shipped("toy_corpus.jsonl"))
    if not 0 <= cfg["sample"] < len(graphs):
        raise ValidationError(f"sample index {cfg['sample']} outside 0..{len(graphs) - 1}")
    g = graphs[cfg["sample"]]
    seq = build_sequence(g, vocab.encode(captions[cfg["sample"]]))
    dist = compute_distance_matrix(seq, add_skip_edges(g))
    keep: list = []
    encoder_forward(make_input([(seq, g, dist)], emb.visual_feature_dim), params, enc, keep)
    rows = []
    for layer, att in enumerate(keep):
        for head in range(att.shape[1]):
            for q in range(att.shape[2]):
                for k in range(att.shape[3]):
                    rows.append({"layer": layer, "head": head, "query": q, "key": k, "distance": int(dist.d[q, k]),
                                 "weight": float(att[0, head, q, k])})
    tokens = [{"index": i, "modality": t.modality.name.lower(), "node_id": t.node_id if t.node_id is not None else -1}
              for i, t in enumerate(seq.tokens)]
    return [
        write_tsv(out / "attention.tsv", ("layer", "head", "query", "key", "distance", "weight"), rows),
        write_tsv(out / "tokens.tsv", ("index", "modality", "node_id"), tokens),
    ]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-hops": cmd_ablate_hops,
    "longtail": cmd_longtail,
    "extract-sg": cmd_extract_sg,
    "dump-kernels": cmd_dump_kernels,
    "dump-attention": cmd_dump_attention,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    run = {}  # filled once the output directory is known, so failures leave a manifest too
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        _accel.configure_threads()
        cfg = resolve(args.command, args)
        out = args.out or Path(os.environ.get(ENV_OUT, "runs")) / args.command
        out.mkdir(parents=True, exist_ok=True)
        run.update(out=out, command=args.command, cfg=cfg, start=time.perf_counter())
        outputs = HANDLERS[args.command](cfg, out)
        write_manifest(out, args.command, argv, cfg, cfg["seed"], time.perf_counter() - run["start"], outputs)
        return 0
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        _failed_manifest(run, argv, f"numeric failure: {exc}")
        return exc.exit_code
    except HopgraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _failed_manifest(run, argv, f"error: {exc}")
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _failed_manifest(run, argv, f"error: {exc}")
        return 1


def _failed_manifest(run: dict, argv: list, status: str) -> None:
    if not run:
        return
    try:
        write_manifest(run["out"], run["command"], argv, run["cfg"], run["cfg"]["seed"],
                       time.perf_counter() - run["start"], [], status=status)
    except OSError:
        log.warning("could not write the failure manifest in %s", run["out"])


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

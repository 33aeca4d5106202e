"""Operator-facing pipeline commands.

Commands: prepare, embed, graph, train, eval, ablate, sweep. Configuration
lives in a key=value file and can be overridden on the command line with
``--key=value`` (CLI beats file beats defaults). Every command writes a
manifest with the resolved config hash and input file hashes, and takes a
lock file so two commands cannot race in one work directory.

Exit codes: 0 ok, 2 input error, 3 credential error, 4 incomplete artifact,
5 missing upstream stage, 1 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import embedding as embed_mod
from . import evaluate as eval_mod
from . import itemgraph as graph_mod
from . import model as model_mod
from . import prompts as prompt_mod
from . import trainer as train_mod

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_CREDENTIAL = 3
EXIT_INCOMPLETE = 4
EXIT_MISSING_STAGE = 5


class CommandError(Exception):
    exit_code = EXIT_INTERNAL


class InputError(CommandError):
    exit_code = EXIT_INPUT


class MissingStageError(CommandError):
    exit_code = EXIT_MISSING_STAGE


class IncompleteArtifactError(CommandError):
    exit_code = EXIT_INCOMPLETE


class CredentialCommandError(CommandError):
    exit_code = EXIT_CREDENTIAL


class LockError(CommandError):
    exit_code = EXIT_INTERNAL


@dataclass
class PipelineConfig:
    # input paths
    interactions: str = ""
    triples: str = ""
    item_map: str = ""
    work_dir: str = "work"
    # data preparation
    kcore_threshold: int = 5
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    seed: int = 42
    # prompt rendering
    second_order_m: int = 10
    char_budget: int = 8000
    # embedding provider
    embed_mode: str = "mock"  # mock | file | remote
    sem_dim: int = 1024
    embedding_file: str = ""
    cache_dir: str = ""
    chat_url: str = ""
    embed_url: str = ""
    chat_model: str = ""
    embed_model: str = ""
    temperature: float = 0.0
    top_p: float = 0.001
    chat_text_path: str = "choices.0.message.content"
    embed_vector_path: str = "data.0.embedding"
    # item graph
    graph_k: int = 20
    # model
    id_dim: int = 64
    attn_dim: int = 0  # 0 means "same as id_dim"
    n_layers: int = 3
    # training
    learning_rate: float = 0.001
    batch_size: int = 1024
    max_epochs: int = 200
    l2_coeff: float = 1e-4
    dropout_rate: float = 0.2
    patience: int = 20
    no_item_semantic: bool = False
    no_user_semantic: bool = False
    no_neighbor_aug: bool = False
    no_second_order: bool = False
    # evaluation
    eval_ks: str = "10,20"
    sweep_ks: str = "0,5,10,20,50"
    # execution
    threads: int = 1
    deterministic: bool = True

    def ks(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.eval_ks.split(",") if x.strip())

    def sweep_values(self) -> list[int]:
        return [int(x) for x in self.sweep_ks.split(",") if x.strip()]

    def resolved_attn_dim(self) -> int:
        return self.attn_dim if self.attn_dim > 0 else self.id_dim

    def flags(self) -> model_mod.AblationFlags:
        return model_mod.AblationFlags(
            no_item_semantic=self.no_item_semantic,
            no_user_semantic=self.no_user_semantic,
            no_neighbor_aug=self.no_neighbor_aug,
            no_second_order=self.no_second_order,
        )

    def train_config(self) -> train_mod.TrainConfig:
        return train_mod.TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            l2_coeff=self.l2_coeff,
            dropout_rate=self.dropout_rate,
            seed=self.seed,
            patience=self.patience,
            flags=self.flags(),
        )


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise InputError(f"config key {name!r}: cannot parse boolean from {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_config(config_path: str | None, overrides: dict[str, str]) -> PipelineConfig:
    cfg = PipelineConfig()
    merged: dict[str, str] = {}
    if config_path:
        if not Path(config_path).exists():
            raise InputError(f"config file not found: {config_path}")
        merged.update(parse_config_file(config_path))
    merged.update(overrides)
    for key, raw in merged.items():
        name = key.replace("-", "_")
        if name not in _FIELD_TYPES:
            raise InputError(f"unknown config key: {key!r}")
        setattr(cfg, name, _coerce(name, raw))
    return cfg


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(cfg: PipelineConfig, command: str, inputs: list[Path], outputs: list[Path]) -> None:
    work = Path(cfg.work_dir)
    config_blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(config_blob.encode("utf-8")).hexdigest(),
        "inputs": {str(p): _sha256_file(p) for p in inputs if p.exists()},
        "outputs": [str(p) for p in outputs],
    }
    with (work / f"manifest_{command}.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


class WorkDirLock:
    """Exclusive lock file guarding a work directory."""

    def __init__(self, work_dir: Path):
        self.path = work_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"work directory is locked by another command ({self.path}); "
                "remove the lock file if that command crashed"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


# ---------------------------------------------------------------------------
# stage helpers


def _data_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.work_dir) / "data"


def _require_dataset(cfg: PipelineConfig) -> data_mod.InteractionDataset:
    d = _data_dir(cfg)
    if not (d / "vocab.tsv").exists():
        raise MissingStageError("no prepared data found; run 'prepare' first")
    return data_mod.load_splits(d)


def _embeddings_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.work_dir) / "embed" / "embeddings.tsv"


def _require_table(cfg: PipelineConfig) -> embed_mod.SemanticEmbeddingTable:
    path = _embeddings_path(cfg)
    if not path.exists():
        raise MissingStageError("no embedding table found; run 'embed' first")
    return embed_mod.load_table_text(path)


def _graph_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.work_dir) / "graph" / "graph.tsv"


def _require_graph(cfg: PipelineConfig) -> graph_mod.ItemItemGraph:
    path = _graph_path(cfg)
    if not path.exists():
        raise MissingStageError("no item graph found; run 'graph' first")
    return graph_mod.load_graph(path)


def _load_kg_for(cfg: PipelineConfig, dataset: data_mod.InteractionDataset) -> data_mod.KnowledgeGraph:
    for name, path in (("triples", cfg.triples), ("item_map", cfg.item_map)):
        if not path or not Path(path).exists():
            raise InputError(f"input not found: {name} file {path!r}")
    return data_mod.load_kg(cfg.triples, cfg.item_map, dataset.item_tokens)


def _make_provider(cfg: PipelineConfig):
    if cfg.embed_mode == "mock":
        return embed_mod.MockProvider(cfg.sem_dim)
    if cfg.embed_mode == "remote":
        settings = embed_mod.RemoteSettings(
            chat_url=cfg.chat_url,
            embed_url=cfg.embed_url,
            chat_model=cfg.chat_model,
            embed_model=cfg.embed_model,
            temperature=cfg.temperature,
            top_p=cfg.top_p,
            chat_text_path=cfg.chat_text_path,
            embed_vector_path=cfg.embed_vector_path,
        )
        return embed_mod.RemoteProvider(cfg.sem_dim, settings)
    raise InputError(f"unknown embed mode {cfg.embed_mode!r} (expected mock, file, or remote)")


def _build_table(
    cfg: PipelineConfig,
    dataset: data_mod.InteractionDataset,
    second_order_m: int,
) -> embed_mod.SemanticEmbeddingTable:
    kg = _load_kg_for(cfg, dataset)
    item_prompts, user_prompts = prompt_mod.build_all_prompts(
        dataset, kg, m=second_order_m, char_budget=cfg.char_budget, seed=cfg.seed
    )
    dump_path = Path(cfg.work_dir) / "prompts.jsonl"
    prompt_mod.dump_prompts(
        [item_prompts[v] for v in sorted(item_prompts)]
        + [user_prompts[u] for u in sorted(user_prompts)],
        dump_path,
    )
    provider = _make_provider(cfg)
    cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else Path(cfg.work_dir) / "cache"
    cache = embed_mod.EmbeddingCache(cache_dir)
    return embed_mod.build_embedding_table(provider, item_prompts, user_prompts, cfg.sem_dim, cache)


def _artifacts_for(
    cfg: PipelineConfig,
    dataset: data_mod.InteractionDataset,
    flags: model_mod.AblationFlags,
    table: embed_mod.SemanticEmbeddingTable | None = None,
    graph: graph_mod.ItemItemGraph | None = None,
) -> train_mod.TrainingArtifacts:
    need_item_sem = not flags.no_item_semantic or not flags.no_neighbor_aug
    need_user_sem = not flags.no_user_semantic
    sem_items = sem_users = None
    if need_item_sem or need_user_sem:
        table = table if table is not None else _require_table(cfg)
        table.validate_complete(dataset.n_items, dataset.n_users)
        if need_item_sem:
            sem_items = table.item_matrix(dataset.n_items)
        if need_user_sem:
            sem_users = table.user_matrix(dataset.n_users)
    neighbor_ids = None
    if not flags.no_neighbor_aug:
        graph = graph if graph is not None else _require_graph(cfg)
        neighbor_ids = graph.neighbor_ids
    return train_mod.TrainingArtifacts(
        adjacency=model_mod.norm_adjacency(dataset),
        sem_items=sem_items,
        sem_users=sem_users,
        neighbor_ids=neighbor_ids,
    )


def _dims_for(cfg: PipelineConfig, dataset: data_mod.InteractionDataset) -> model_mod.ModelDims:
    return model_mod.ModelDims(
        n_users=dataset.n_users,
        n_items=dataset.n_items,
        id_dim=cfg.id_dim,
        sem_dim=cfg.sem_dim,
        attn_dim=cfg.resolved_attn_dim(),
        n_layers=cfg.n_layers,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: PipelineConfig) -> None:
    for name, path in (("interactions", cfg.interactions), ("triples", cfg.triples), ("item_map", cfg.item_map)):
        if not path or not Path(path).exists():
            raise InputError(f"input not found: {name} file {path!r}")
    raw = data_mod.load_interactions(cfg.interactions)
    filtered = data_mod.kcore_filter(raw.edges, cfg.kcore_threshold)
    if not filtered:
        raise InputError(f"k-core filtering at threshold {cfg.kcore_threshold} removed every edge")
    dataset = data_mod.split_dataset(
        filtered,
        train_ratio=cfg.train_ratio,
        val_ratio=cfg.val_ratio,
        seed=cfg.seed,
        user_tokens=raw.user_tokens,
        item_tokens=raw.item_tokens,
    )
    out = _data_dir(cfg)
    data_mod.save_splits(dataset, out)
    print(
        f"prepared {dataset.n_users} users, {dataset.n_items} items: "
        f"{dataset.train_edges.shape[0]} train / {dataset.val_edges.shape[0]} val / "
        f"{dataset.test_edges.shape[0]} test edges"
    )
    _write_manifest(
        cfg,
        "prepare",
        [Path(cfg.interactions), Path(cfg.triples), Path(cfg.item_map)],
        [out / f"{n}.tsv" for n in ("train", "val", "test", "vocab")],
    )


def cmd_embed(cfg: PipelineConfig) -> None:
    dataset = _require_dataset(cfg)
    out_path = _embeddings_path(cfg)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if cfg.embed_mode == "file":
        if not cfg.embedding_file or not Path(cfg.embedding_file).exists():
            raise InputError(f"input not found: embedding file {cfg.embedding_file!r}")
        loader = (
            embed_mod.load_table_binary
            if cfg.embedding_file.endswith(".clkg")
            else embed_mod.load_table_text
        )
        table = loader(cfg.embedding_file)
        if table.dim != cfg.sem_dim:
            raise InputError(
                f"embedding file dimension {table.dim} does not match configured sem_dim {cfg.sem_dim}"
            )
        missing_items, missing_users = table.missing_ids(dataset.n_items, dataset.n_users)
        if missing_items or missing_users:
            raise IncompleteArtifactError(
                f"embedding file incomplete: missing items {missing_items}, missing users {missing_users}"
            )
    else:
        try:
            table = _build_table(cfg, dataset, cfg.second_order_m)
        except embed_mod.CredentialError as exc:
            raise CredentialCommandError(str(exc)) from exc
    embed_mod.save_table_text(table, out_path)
    print(f"embedded {len(table.item_vectors)} items and {len(table.user_vectors)} users (dim {table.dim})")
    inputs = [_data_dir(cfg) / "vocab.tsv"]
    if cfg.embed_mode == "file":
        inputs.append(Path(cfg.embedding_file))
    _write_manifest(cfg, "embed", inputs, [out_path])


def cmd_graph(cfg: PipelineConfig) -> None:
    dataset = _require_dataset(cfg)
    table = _require_table(cfg)
    table.validate_complete(dataset.n_items, dataset.n_users)
    graph = graph_mod.top_k_neighbors(table, cfg.graph_k)
    out_path = _graph_path(cfg)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    graph_mod.save_graph(graph, out_path)
    print(f"built item graph with k={cfg.graph_k} over {graph.n_items} items")
    _write_manifest(cfg, "graph", [_embeddings_path(cfg)], [out_path])


def cmd_train(cfg: PipelineConfig) -> None:
    dataset = _require_dataset(cfg)
    flags = cfg.flags()
    try:
        artifacts = _artifacts_for(cfg, dataset, flags)
    except embed_mod.EmbeddingError as exc:
        raise IncompleteArtifactError(str(exc)) from exc
    model_dir = Path(cfg.work_dir) / "model"
    result = train_mod.train(dataset, artifacts, _dims_for(cfg, dataset), cfg.train_config(), model_dir)
    with (model_dir / "history.jsonl").open("w", encoding="utf-8") as fh:
        for row in result.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(
        f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
        f"(val recall {result.best_val_recall:.6f})"
    )
    inputs = [_data_dir(cfg) / "train.tsv", _embeddings_path(cfg), _graph_path(cfg)]
    _write_manifest(cfg, "train", inputs, [model_dir / "best.clkm", model_dir / "history.jsonl"])


def _final_representations(
    cfg: PipelineConfig,
    dataset: data_mod.InteractionDataset,
    state: model_mod.ModelState,
    flags: model_mod.AblationFlags,
):
    artifacts = _artifacts_for(cfg, dataset, flags)
    trace = model_mod.forward_full(
        state,
        artifacts.adjacency,
        artifacts.sem_items,
        artifacts.sem_users,
        artifacts.neighbor_ids,
        flags=flags,
        training=False,
    )
    return trace.user_final, trace.item_final


def cmd_eval(cfg: PipelineConfig) -> None:
    dataset = _require_dataset(cfg)
    ckpt = Path(cfg.work_dir) / "model" / "best.clkm"
    if not ckpt.exists():
        raise MissingStageError("no trained checkpoint found; run 'train' first")
    state = model_mod.load_checkpoint(ckpt)
    user_final, item_final = _final_representations(cfg, dataset, state, cfg.flags())
    report = eval_mod.evaluate(user_final, item_final, dataset, ks=cfg.ks())
    out_dir = Path(cfg.work_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_mod.write_report(report, out_dir / "report.txt", out_dir / "report.tsv")
    for key in sorted(report.means):
        print(f"{key}\t{report.means[key]:.6f}")
    _write_manifest(cfg, "eval", [ckpt], [out_dir / "report.txt", out_dir / "report.tsv"])


_ABLATION_VARIANTS = ("full", "no_item_semantic", "no_user_semantic", "no_neighbor_aug", "no_second_order")


def cmd_ablate(cfg: PipelineConfig) -> None:
    dataset = _require_dataset(cfg)
    table = _require_table(cfg)
    graph = _require_graph(cfg)
    if cfg.embed_mode == "file":
        raise InputError(
            "the no_second_order ablation needs prompts to be re-rendered; "
            "it is unavailable in file embedding mode"
        )
    rows: list[tuple[str, eval_mod.MetricReport]] = []
    for variant in _ABLATION_VARIANTS:
        flags = cfg.flags()
        use_table, use_graph = table, graph
        if variant == "no_second_order":
            flags.no_second_order = True
            use_table = _build_table(cfg, dataset, second_order_m=0)
            use_graph = graph_mod.top_k_neighbors(use_table, cfg.graph_k)
        elif variant != "full":
            setattr(flags, variant, True)
        artifacts = _artifacts_for(cfg, dataset, flags, table=use_table, graph=use_graph)
        config = cfg.train_config()
        config.flags = flags
        result = train_mod.train(dataset, artifacts, _dims_for(cfg, dataset), config)
        trace = model_mod.forward_full(
            result.state,
            artifacts.adjacency,
            artifacts.sem_items,
            artifacts.sem_users,
            artifacts.neighbor_ids,
            flags=flags,
            training=False,
        )
        report = eval_mod.evaluate(trace.user_final, trace.item_final, dataset, ks=cfg.ks())
        rows.append((variant, report))
        print(f"{variant}\t" + "\t".join(f"{k}={report.means[k]:.6f}" for k in sorted(report.means)))
    out_dir = Path(cfg.work_dir) / "ablate"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "ablation.tsv"
    keys = sorted(rows[0][1].means)
    with out_path.open("w", encoding="utf-8") as fh:
        fh.write("variant\t" + "\t".join(keys) + "\n")
        for variant, report in rows:
            fh.write(variant + "\t" + "\t".join(f"{report.means[k]:.6f}" for k in keys) + "\n")
    _write_manifest(cfg, "ablate", [_embeddings_path(cfg), _graph_path(cfg)], [out_path])


def cmd_sweep(cfg: PipelineConfig) -> None:
    dataset = _require_dataset(cfg)
    table = _require_table(cfg)
    table.validate_complete(dataset.n_items, dataset.n_users)
    results = eval_mod.k_sweep(
        dataset, table, cfg.sweep_values(), _dims_for(cfg, dataset), cfg.train_config()
    )
    out_dir = Path(cfg.work_dir) / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "sweep.tsv"
    eval_mod.write_sweep(results, out_path)
    for k, report in results:
        print(f"k={k}\t" + "\t".join(f"{key}={report.means[key]:.6f}" for key in sorted(report.means)))
    _write_manifest(cfg, "sweep", [_embeddings_path(cfg)], [out_path])


_COMMANDS = {
    "prepare": cmd_prepare,
    "embed": cmd_embed,
    "graph": cmd_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def _split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Separate --key=value overrides from structural arguments."""
    structural: list[str] = []
    overrides: dict[str, str] = {}
    for arg in argv:
        if arg.startswith("--") and "=" in arg and not arg.startswith("--config="):
            key, _, value = arg[2:].partition("=")
            overrides[key] = value
        else:
            structural.append(arg)
    return structural, overrides


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    structural, overrides = _split_overrides(argv)
    parser = argparse.ArgumentParser(
        prog="colakg",
        description="Knowledge-graph aware recommendation pipeline",
        epilog="Any config key can be overridden with --key=value.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="key=value config file")
    try:
        args = parser.parse_args(structural)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, overrides)
        work = Path(cfg.work_dir)
        work.mkdir(parents=True, exist_ok=True)
        with WorkDirLock(work):
            _COMMANDS[args.command](cfg)
        return EXIT_OK
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except embed_mod.CredentialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CREDENTIAL
    except data_mod.ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # internal failure
        log.exception("command failed")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

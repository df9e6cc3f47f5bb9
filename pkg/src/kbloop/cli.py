"""Command-line surface: prepare a KB, pretrain, joint-train, evaluate, and
answer single questions."""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click

from . import agent as agent_mod
from . import config as config_mod
from . import joint as joint_mod
from . import kb as kb_mod
from . import metrics as metrics_mod
from .completer import CompletionQuery, NativeCompleter, RemoteCompleter
from .llm import LiveBackend, ScriptedBackend


def _load_run_config(config_path, **overrides) -> config_mod.RunConfig:
    if config_path is not None and not Path(config_path).exists():
        raise click.UsageError(f"config file not found: {config_path}")
    return config_mod.load_config(config_path, overrides)


def _full_kb(cfg: config_mod.RunConfig) -> kb_mod.KnowledgeBase:
    for name in ("triples_path", "entities_path", "relations_path"):
        if not getattr(cfg, name):
            raise click.UsageError(f"missing {name} (set it in the config file or via flags)")
    return kb_mod.load_kb(cfg.triples_path, cfg.entities_path, cfg.relations_path)


def _write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in sorted(triples):
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")


def _read_triples(path) -> list[kb_mod.Triple]:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                h, r, t = line.rstrip("\n").split("\t")
                triples.append(kb_mod.Triple(h, r, t))
    return triples


def _working_kb(cfg, run_dir) -> kb_mod.KnowledgeBase:
    working = Path(run_dir) / "working_triples.tsv"
    if not working.exists():
        raise click.UsageError(f"no prepared KB in {run_dir}; run `kbloop kb prepare` first")
    full = _full_kb(cfg)
    return full.with_triples(_read_triples(working))


def _backend(cfg, scripted):
    if scripted:
        if not Path(scripted).exists():
            raise click.UsageError(f"scripted transcript not found: {scripted}")
        return ScriptedBackend.from_jsonl(scripted)
    if not cfg.llm_endpoint or not cfg.llm_model:
        raise click.UsageError(
            "no chat endpoint configured; set llm_endpoint/llm_model or pass --scripted"
        )
    return LiveBackend(cfg.llm_endpoint, cfg.llm_model, api_key=config_mod.api_key())


def _completer(cfg, run_dir=None, kb=None, require_checkpoint=False):
    if cfg.completer_endpoint:
        return RemoteCompleter(
            cfg.completer_endpoint,
            r_samples=cfg.r_samples,
            temperature=cfg.slm_temperature,
            max_context=cfg.max_context,
        )
    checkpoint = Path(run_dir) / "completer.npz" if run_dir else None
    if checkpoint and checkpoint.exists():
        return NativeCompleter.load(checkpoint)
    if require_checkpoint:
        raise click.UsageError(f"no completer checkpoint in {run_dir}; run `kbloop pretrain` first")
    return NativeCompleter(kb, dim=cfg.embedding_dim, seed=cfg.seed)


def _emit_report(run_dir, payload: dict) -> None:
    text = json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2)
    click.echo(text)
    if run_dir:
        with open(Path(run_dir) / "report.json", "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Joint knowledge-base completion and question answering."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@main.group()
def kb():
    """Knowledge-base preparation."""


@kb.command("prepare")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--triples", default=None, help="Triples file (head<TAB>relation<TAB>tail).")
@click.option("--entities", default=None, help="Entities file (id<TAB>label<TAB>description).")
@click.option("--relations", default=None, help="Relations file (id<TAB>label<TAB>desc<TAB>schema).")
@click.option("--n-valid", type=int, default=None)
@click.option("--n-test", type=int, default=None)
@click.option("--keep-fraction", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--run-dir", type=click.Path(), required=True)
def kb_prepare(config_path, triples, entities, relations, n_valid, n_test, keep_fraction, seed, run_dir):
    """Load, split, and degrade the KB into a run directory."""
    cfg = _load_run_config(
        config_path,
        triples_path=triples, entities_path=entities, relations_path=relations,
        n_valid=n_valid, n_test=n_test, keep_fraction=keep_fraction, seed=seed,
    )
    full = _full_kb(cfg)
    bundle = kb_mod.split(full, cfg.n_valid, cfg.n_test, cfg.seed)
    working = kb_mod.degrade(bundle.train, cfg.keep_fraction, cfg.seed, full)

    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_triples(out / "train.tsv", bundle.train)
    _write_triples(out / "valid.tsv", bundle.valid)
    _write_triples(out / "test.tsv", bundle.test)
    _write_triples(out / "working_triples.tsv", working)
    config_mod.snapshot(cfg, out)
    click.echo(
        f"prepared KB: train={len(bundle.train)} valid={len(bundle.valid)} "
        f"test={len(bundle.test)} working={len(working)}"
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), required=True)
def pretrain(config_path, run_dir):
    """Pretrain the completer on the prepared (degraded) training graph."""
    cfg = _load_run_config(config_path)
    working_kb = _working_kb(cfg, run_dir)
    completer = _completer(cfg, kb=working_kb)
    started = time.perf_counter()
    completer.pretrain(sorted(working_kb.triples), working_kb, cfg.training_config())
    if hasattr(completer, "save"):
        completer.save(Path(run_dir) / "completer.npz")
    click.echo(f"pretrained completer in {time.perf_counter() - started:.1f}s")


@main.command("train-joint")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--qa", "qa_path", type=click.Path(), required=True, help="QA training set (JSONL).")
@click.option("--scripted", type=click.Path(), default=None, help="Scripted chat transcript (JSONL).")
@click.option("--resume", is_flag=True, help="Continue from the last completed question.")
def train_joint_cmd(config_path, run_dir, qa_path, scripted, resume):
    """Run the joint loop: episodes, path parsing, incremental fine-tuning."""
    cfg = _load_run_config(config_path)
    working_kb = _working_kb(cfg, run_dir)
    completer = _completer(cfg, run_dir=run_dir, kb=working_kb)
    backend = _backend(cfg, scripted)
    qa_train = joint_mod.load_qa_examples(qa_path)
    pretrain_triples = sorted(working_kb.triples)
    result = joint_mod.run_joint_training(
        run_dir,
        working_kb,
        qa_train,
        completer,
        backend,
        resume=resume,
        agent_config=cfg.agent_config(),
        train_config=cfg.training_config(),
        samples_per_triple=cfg.replay_samples_per_triple,
        pretrain_triples=pretrain_triples,
    )
    finetuned = sum(1 for r in result.records if r.finetuned)
    click.echo(f"joint training done: {len(result.records)} questions, {finetuned} fine-tune updates")


@main.command("eval-kbc")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--split", "split_name", type=click.Choice(["valid", "test"]), default="test")
@click.option("--k", "ks", default="1,3,10", help="Comma-separated Hits@k cutoffs.")
@click.option("--filtered", is_flag=True, help="Drop other known-true tails before ranking.")
@click.option("--limit", type=int, default=None, help="Evaluate only the first N queries.")
def eval_kbc(config_path, run_dir, split_name, ks, filtered, limit):
    """Rank gold tails for held-out triples and report MRR / Hits@k."""
    cfg = _load_run_config(config_path)
    try:
        cutoffs = sorted({int(x) for x in ks.split(",") if x.strip()})
    except ValueError:
        raise click.UsageError(f"bad --k list: {ks!r}")
    working_kb = _working_kb(cfg, run_dir)
    completer = _completer(cfg, run_dir=run_dir, kb=working_kb, require_checkpoint=True)
    queries = _read_triples(Path(run_dir) / f"{split_name}.tsv")
    if limit:
        queries = queries[:limit]
    known = set()
    if filtered:
        for name in ("train.tsv", "valid.tsv", "test.tsv"):
            known.update(_read_triples(Path(run_dir) / name))

    rankings, gold = [], []
    n_candidates = len(working_kb.entities)
    for q in queries:
        predictions = completer.predict(
            CompletionQuery.tail_query(q.head, q.relation), working_kb, n_candidates
        )
        ranking = [p.entity for p in predictions]
        if filtered:
            ranking = [
                e for e in ranking
                if e == q.tail or kb_mod.Triple(q.head, q.relation, e) not in known
            ]
        rankings.append(ranking)
        gold.append(q.tail)
    result = metrics_mod.kbc_eval(rankings, gold, ks=tuple(cutoffs))
    payload = result.to_dict()
    payload["split"] = split_name
    payload["filtered"] = filtered
    _emit_report(run_dir, payload)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), default=None)
@click.option("--question", required=True)
@click.option("--topic", default="", help="Comma-separated topic entity ids.")
@click.option("--scripted", type=click.Path(), default=None)
def answer(config_path, run_dir, question, topic, scripted):
    """Answer one question with the agent loop."""
    cfg = _load_run_config(config_path)
    working_kb = _working_kb(cfg, run_dir) if run_dir else _full_kb(cfg)
    completer = _completer(cfg, run_dir=run_dir, kb=working_kb)
    backend = _backend(cfg, scripted)
    topics = [t.strip() for t in topic.split(",") if t.strip()]
    trajectory = agent_mod.run_episode(
        question, topics, working_kb, completer, backend,
        config=cfg.agent_config(), params=cfg.llm_params(),
    )
    click.echo(json.dumps(
        {"answers": trajectory.final_answers, "llm_calls": trajectory.llm_call_count,
         "steps": len(trajectory.steps)},
        ensure_ascii=False, sort_keys=True,
    ))


@main.command("eval-kbqa")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--qa", "qa_path", type=click.Path(), required=True)
@click.option("--scripted", type=click.Path(), default=None)
def eval_kbqa(config_path, run_dir, qa_path, scripted):
    """Run inference episodes over a QA set and report Hits@1 + efficiency."""
    cfg = _load_run_config(config_path)
    working_kb = _working_kb(cfg, run_dir)
    completer = _completer(cfg, run_dir=run_dir, kb=working_kb)
    backend = _backend(cfg, scripted)
    examples = joint_mod.load_qa_examples(qa_path)

    log_path = Path(run_dir) / "kbqa_trajectories.jsonl"
    final_answers, gold = [], []
    with open(log_path, "w", encoding="utf-8") as fh:
        for ex in examples:
            trajectory = agent_mod.run_episode(
                ex.question, list(ex.topic_entities), working_kb, completer, backend,
                config=cfg.agent_config(), params=cfg.llm_params(),
            )
            fh.write(json.dumps(trajectory.to_dict(include_timing=True),
                                ensure_ascii=False, sort_keys=True) + "\n")
            final_answers.append(trajectory.final_answers)
            gold.append(list(ex.gold_answers))
    efficiency = metrics_mod.efficiency_report(log_path)
    result = metrics_mod.KbqaEvalResult(
        hits_at_1=metrics_mod.kbqa_hits_at_1(final_answers, gold),
        avg_llm_calls=efficiency["avg_llm_calls"],
        avg_seconds=efficiency["avg_seconds"],
        n_questions=efficiency["n_questions"],
    )
    _emit_report(run_dir, result.to_dict())


@main.command()
@click.option("--run-dir", type=click.Path(), required=True)
def report(run_dir):
    """Reprint the stored report and trajectory efficiency for a run."""
    report_path = Path(run_dir) / "report.json"
    if report_path.exists():
        click.echo(report_path.read_text(encoding="utf-8").rstrip("\n"))
    log_path = Path(run_dir) / "trajectories.jsonl"
    if log_path.exists():
        click.echo(json.dumps(metrics_mod.efficiency_report(log_path),
                              ensure_ascii=False, sort_keys=True, indent=2))
    if not report_path.exists() and not log_path.exists():
        raise click.UsageError(f"nothing to report in {run_dir}")


if __name__ == "__main__":
    main()

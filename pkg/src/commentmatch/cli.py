"""Command-line pipeline: ingest, synth, train, mine, score, baseline,
evaluate, curve, sample-test.

Exit codes: 0 success, 1 validation/usage error, 2 I/O or transport error.
Every artifact-producing command writes a <output>.manifest.json recording
the command line, resolved config, seed, input checksums, and outputs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import baselines, corpus as corpus_mod, evaluation, mining
from .encoder import load_checkpoint
from .errors import TransportError, ValidationError
from .manifest import write_run_manifest
from .scoring import ScoringConfig, match_probability
from .trainer import TrainConfig, train


def _default_threads() -> int:
    return os.cpu_count() or 1


def _eprint(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _manifest_for(out: Path, args, config: dict, inputs: list, outputs: list,
                  started: float) -> None:
    write_run_manifest(
        Path(str(out) + ".manifest.json"),
        command=list(args.argv),
        config=config,
        seed=getattr(args, "seed", None),
        inputs=inputs,
        outputs=outputs,
        wall_time_s=time.perf_counter() - started,
    )


def cmd_ingest(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus)
    corpus_mod.chunk_corpus(rules, args.min_chunk_chars, args.max_chunk_chars)
    kept, stats = corpus_mod.filter_rules(rules)
    corpus_mod.save_corpus(kept, args.out)
    _manifest_for(
        Path(args.out), args,
        {"min_chunk_chars": args.min_chunk_chars, "max_chunk_chars": args.max_chunk_chars},
        [args.corpus], [args.out], started,
    )
    print(
        f"ingested {stats.n_rules} rules, {stats.n_responses} responses, "
        f"{stats.n_comments} comments, {stats.n_chunks} chunks -> {args.out}"
    )
    return 0


def _quantized_annotations(planted: dict[tuple[str, str], float]) -> list:
    """Planted relevance -> three integer pseudo-annotators around 1+4r."""
    annotations = []
    for (response_id, chunk_id), relevance in sorted(planted.items()):
        target = 1.0 + 4.0 * relevance
        scores = sorted(
            min(5, max(1, s))
            for s in (math.floor(target), round(target), math.ceil(target))
        )
        annotations.append(
            evaluation.AnnotatedPair(
                chunk_id=chunk_id,
                response_id=response_id,
                annotator_scores=scores,
                mean_score=sum(scores) / len(scores),
            )
        )
    return annotations


def cmd_synth(args) -> int:
    started = time.perf_counter()
    rules, planted = corpus_mod.generate_synthetic_corpus(
        n_rules=args.rules,
        chunks_per_rule=args.chunks_per_rule,
        responses_per_rule=args.responses_per_rule,
        vocab_topics=args.topics,
        seed=args.seed,
    )
    corpus_mod.save_corpus(rules, args.out)
    outputs = [args.out]
    if args.relevance_out:
        with open(args.relevance_out, "w", encoding="utf-8", newline="") as fh:
            fh.write("response_id,chunk_id,score\n")
            for (response_id, chunk_id), rel in sorted(planted.items()):
                fh.write(f"{response_id},{chunk_id},{rel:.17g}\n")
        outputs.append(args.relevance_out)
    if args.annotations_out:
        evaluation.save_annotations(_quantized_annotations(planted), args.annotations_out)
        outputs.append(args.annotations_out)
    config = {
        "rules": args.rules, "chunks_per_rule": args.chunks_per_rule,
        "responses_per_rule": args.responses_per_rule, "topics": args.topics,
    }
    _manifest_for(Path(args.out), args, config, [], outputs, started)
    print(f"synthesized {len(rules)} rules ({len(planted)} planted pairs) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus)
    cfg = TrainConfig(
        alpha=args.alpha,
        learning_rate=args.lr,
        batch_size=args.batch,
        iterations=args.iterations,
        steps_per_iteration=args.steps_per_iteration,
        weight_decay=args.weight_decay,
        seed=args.seed,
        dim=args.dim,
        feature_dim=args.feature_dim,
    )
    _, reports = train(rules, cfg, out_dir=args.out_dir)
    for rep in reports:
        loss = "n/a" if rep.mean_step_loss is None else f"{rep.mean_step_loss:.6f}"
        print(
            f"iteration {rep.iteration}: positives={rep.n_positive_pairs} "
            f"steps={rep.n_steps} mean_loss={loss}"
        )
    _manifest_for(
        Path(args.out_dir) / "train", args, asdict(cfg), [args.corpus],
        [str(Path(args.out_dir) / f"ckpt_iter{k}") for k in range(cfg.iterations + 1)],
        started,
    )
    return 0


def cmd_mine(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus)
    params = load_checkpoint(args.checkpoint)
    cache = mining.build_corpus_cache(rules, params, threads=args.threads)
    pairs = mining.mine_positive_pairs(rules, cache)
    mining.save_positive_pairs(pairs, args.out)
    _manifest_for(Path(args.out), args, {}, [args.corpus, args.checkpoint],
                  [args.out], started)
    print(f"mined {len(pairs)} positive pairs -> {args.out}")
    return 0


def cmd_score(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus)
    params = load_checkpoint(args.checkpoint)
    pairs = evaluation.load_pairs(args.pairs)
    texts = {sid: text for sid, text, _, _ in mining.corpus_strings(rules)}
    cfg = ScoringConfig(alpha=args.alpha)
    embeddings = {}

    def embedding_of(sid, pair):
        if sid not in embeddings:
            if sid not in texts:
                raise ValidationError(f"pair {pair} references unknown id {sid!r}")
            from .encoder import embed

            embeddings[sid] = embed(texts[sid], params)
        return embeddings[sid]

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("response_id,chunk_id,cosine_similarity,probability\n")
        for pair in pairs:
            response_id, chunk_id = pair
            score = match_probability(
                embedding_of(chunk_id, pair), embedding_of(response_id, pair), cfg
            )
            fh.write(
                f"{response_id},{chunk_id},"
                f"{score.cosine_similarity:.17g},{score.probability:.17g}\n"
            )
    _manifest_for(Path(args.out), args, {"alpha": args.alpha},
                  [args.corpus, args.checkpoint, args.pairs], [args.out], started)
    print(f"scored {len(pairs)} pairs -> {args.out}")
    return 0


def cmd_baseline_bm25(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus)
    scores = baselines.bm25_corpus_scores(rules, k1=args.k1, b=args.b)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("response_id,chunk_id,score\n")
        for (response_id, chunk_id), value in sorted(scores.items()):
            fh.write(f"{response_id},{chunk_id},{value:.17g}\n")
    _manifest_for(Path(args.out), args, {"k1": args.k1, "b": args.b},
                  [args.corpus], [args.out], started)
    print(f"bm25 scored {len(scores)} pairs -> {args.out}")
    return 0


def cmd_baseline_judge(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus)
    pairs = evaluation.load_pairs(args.pairs)
    texts = {sid: text for sid, text, _, _ in mining.corpus_strings(rules)}

    if args.replay:
        transport = baselines.ReplayTransport.from_fixture(args.replay)
    else:
        transport = baselines.HttpChatTransport(
            requests_per_minute=args.rpm,
            audit_path=args.audit or str(args.out) + ".audit.jsonl",
        )

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("response_id,chunk_id,score,explanation\n")
        for pair in pairs:
            response_id, chunk_id = pair
            for sid in pair:
                if sid not in texts:
                    raise ValidationError(f"pair {pair} references unknown id {sid!r}")
            verdict = baselines.judge_pair(texts[chunk_id], texts[response_id], transport)
            explanation = verdict.explanation.replace('"', "'").replace("\n", " ")
            fh.write(f'{response_id},{chunk_id},{verdict.score},"{explanation}"\n')
    inputs = [args.corpus, args.pairs] + ([args.replay] if args.replay else [])
    _manifest_for(Path(args.out), args, {"replay": bool(args.replay)},
                  inputs, [args.out], started)
    print(f"judged {len(pairs)} pairs -> {args.out}")
    return 0


def _model_scores_for(args, rules, annotations):
    pairs = [(ann.response_id, ann.chunk_id) for ann in annotations]
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        return evaluation.checkpoint_scores(params, rules, pairs, alpha=args.alpha)
    if args.bm25:
        return baselines.bm25_corpus_scores(rules)
    return evaluation.load_scores(args.scores)


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus) if args.corpus else []
    if (args.checkpoint or args.bm25) and not args.corpus:
        raise ValidationError("--corpus is required with --checkpoint/--bm25")
    annotations = evaluation.load_annotations(args.annotations, args.min_annotators)
    scores = _model_scores_for(args, rules, annotations)
    report = evaluation.evaluate_method(scores, annotations, args.method_name)
    evaluation.save_scatter(report, args.out)
    inputs = [p for p in (args.corpus, args.annotations, args.checkpoint, args.scores) if p]
    _manifest_for(Path(args.out), args, {"method": args.method_name, "alpha": args.alpha},
                  inputs, [args.out], started)
    print(f"{args.method_name}: pearson_r={report.pearson_r:.6f} on {report.n_pairs} pairs")
    return 0


def cmd_curve(args) -> int:
    started = time.perf_counter()
    rules = corpus_mod.load_corpus(args.corpus)
    annotations = evaluation.load_annotations(args.annotations, args.min_annotators)
    ckpt_dir = Path(args.ckpt_dir)
    checkpoints = sorted(
        ckpt_dir.glob("ckpt_iter*"),
        key=lambda p: int(p.name.removeprefix("ckpt_iter")),
    )
    if not checkpoints:
        raise ValidationError(f"no ckpt_iter* checkpoints in {ckpt_dir}")
    curve = evaluation.iteration_curve(checkpoints, rules, annotations, alpha=args.alpha)
    evaluation.save_curve(curve, args.out)
    for iteration, r in curve:
        print(f"iteration {iteration}: pearson_r={r:.6f}")
    _manifest_for(Path(args.out), args, {"alpha": args.alpha},
                  [args.corpus, args.annotations], [args.out], started)
    return 0


def cmd_sample_test(args) -> int:
    started = time.perf_counter()
    scores = evaluation.load_scores(args.scores)
    sample = evaluation.sample_binned_test_set(
        scores,
        per_bin=args.per_bin,
        threshold=args.threshold,
        bin_width=args.bin_width,
        batches=args.batches,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("response_id,chunk_id\n")
        for response_id, chunk_id in sample:
            fh.write(f"{response_id},{chunk_id}\n")
    config = {
        "per_bin": args.per_bin, "threshold": args.threshold,
        "bin_width": args.bin_width, "batches": args.batches,
        "batch_size": args.batch_size,
    }
    _manifest_for(Path(args.out), args, config, [args.scores], [args.out], started)
    print(f"sampled {len(sample)} test pairs -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="commentmatch",
        description="Match public comment chunks to regulator responses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    leaves: list[argparse.ArgumentParser] = []

    p = sub.add_parser("ingest", help="chunk and filter a raw corpus")
    leaves.append(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-chunk-chars", type=int, default=corpus_mod.DEFAULT_MIN_CHUNK_CHARS)
    p.add_argument("--max-chunk-chars", type=int, default=corpus_mod.DEFAULT_MAX_CHUNK_CHARS)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    p.add_argument("--rules", type=int, default=60)
    p.add_argument("--chunks-per-rule", type=int, default=20)
    p.add_argument("--responses-per-rule", type=int, default=5)
    p.add_argument("--topics", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--relevance-out", default=None)
    p.add_argument("--annotations-out", default=None)
    p.set_defaults(func=cmd_synth)
    leaves.append(p)

    p = sub.add_parser("train", help="run the iterative training scheme")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=50.0)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--steps-per-iteration", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--feature-dim", type=int, default=1 << 18)
    p.set_defaults(func=cmd_train)
    leaves.append(p)

    p = sub.add_parser("mine", help="export mined positive pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)
    leaves.append(p)

    p = sub.add_parser("score", help="score (response, chunk) pairs with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=50.0)
    p.set_defaults(func=cmd_score)
    leaves.append(p)

    p = sub.add_parser("baseline", help="baseline scorers")
    bsub = p.add_subparsers(dest="baseline", required=True)

    pb = bsub.add_parser("bm25", help="per-rule normalized BM25")
    pb.add_argument("--corpus", required=True)
    pb.add_argument("--out", required=True)
    pb.add_argument("--k1", type=float, default=baselines.DEFAULT_K1)
    pb.add_argument("--b", type=float, default=baselines.DEFAULT_B)
    pb.set_defaults(func=cmd_baseline_bm25)
    leaves.append(pb)

    pj = bsub.add_parser("judge", help="LLM judge over a pairs file")
    pj.add_argument("--pairs", required=True)
    pj.add_argument("--corpus", required=True)
    pj.add_argument("--out", required=True)
    pj.add_argument("--replay", default=None, help="JSONL fixture of recorded replies")
    pj.add_argument("--rpm", type=float, default=None, help="requests per minute cap")
    pj.add_argument("--audit", default=None)
    pj.set_defaults(func=cmd_baseline_judge)
    leaves.append(pj)

    p = sub.add_parser("evaluate", help="correlate model scores with annotations")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", default=None)
    group.add_argument("--bm25", action="store_true")
    group.add_argument("--scores", default=None, help="precomputed score CSV")
    p.add_argument("--corpus", default=None)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=50.0)
    p.add_argument("--method-name", default="model")
    p.add_argument("--min-annotators", type=int, default=evaluation.DEFAULT_MIN_ANNOTATORS)
    p.set_defaults(func=cmd_evaluate)
    leaves.append(p)

    p = sub.add_parser("curve", help="per-iteration correlation curve")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=50.0)
    p.add_argument("--min-annotators", type=int, default=evaluation.DEFAULT_MIN_ANNOTATORS)
    p.set_defaults(func=cmd_curve)
    leaves.append(p)

    p = sub.add_parser("sample-test", help="binned test-pair sampling")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-bin", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--bin-width", type=float, default=0.1)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=40)
    p.set_defaults(func=cmd_sample_test)
    leaves.append(p)

    for leaf in leaves:
        leaf.add_argument("--threads", type=int, default=_default_threads())

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    args.argv = list(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        _eprint(str(exc))
        return 1
    except ValueError as exc:
        _eprint(str(exc))
        return 1
    except TransportError as exc:
        _eprint(str(exc))
        return 2
    except OSError as exc:
        _eprint(str(exc))
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))

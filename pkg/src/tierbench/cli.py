"""Command-line front end.

One binary with subcommands; every run writes a manifest.json into the
output directory recording the package version, arguments, seeds, and
sha256 digests of the inputs, so reruns are diffable. Outputs are plain
JSON/JSONL with sorted keys: identical inputs and seed reproduce them
bit-exactly. Exit codes: 0 success, 1 validation or usage failure,
2 I/O or transport failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import platform
import re
import sys
from pathlib import Path

from . import __version__, aggregate, calibrate, classify, collect, ingest
from . import metrics as metrics_mod
from . import pairwise as pairwise_mod
from . import rlsim, stats
from .errors import (AuthError, PartialCollection, SchemaError,
                     TierBenchError, TransportError, ValidationError)
from .tiers import TIER_ORDER, Tier


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for I/O failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Output plumbing


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _plain(obj):
    """Recursively coerce report objects to JSON-encodable plain types."""
    import numpy as np
    if isinstance(obj, dict):
        return {_plain_key(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Tier):
        return obj.label
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    return obj


def _plain_key(k):
    if isinstance(k, Tier):
        return k.label
    if isinstance(k, tuple):
        return "::".join(str(x) for x in k)
    return str(k) if not isinstance(k, str) else k


class RunDir:
    """Collects outputs for one run and finalizes the manifest."""

    def __init__(self, out: Path, subcommand: str, argv: list[str],
                 seed: int | None = None):
        self.out = out
        self.subcommand = subcommand
        self.argv = argv
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def track_input(self, path) -> Path:
        p = Path(path)
        self.inputs[str(path)] = _sha256(p)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.out / name
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(_plain(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.outputs.append(name)
        return p

    def path_for(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self, status: str = "ok", error: str | None = None) -> None:
        manifest = {
            "command": self.subcommand,
            "argv": self.argv,
            "package": {"name": "tierbench", "version": __version__},
            "python": platform.python_version(),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "status": status,
            "error": error,
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Shared input helpers


def _load_bench(run: RunDir, path) -> ingest.BenchmarkSet:
    return ingest.load_benchmark(run.track_input(path))


def _load_preds(run: RunDir, path) -> tuple[list[ingest.PredictionRecord], dict]:
    records, meta = ingest.load_predictions(run.track_input(path))
    return records, meta or {}


def _evaluator_name(records, meta, fallback: str) -> str:
    ids = {r.evaluator_id for r in records}
    if len(ids) == 1:
        return next(iter(ids))
    return str(meta.get("evaluator_id", fallback))


def _point_labels(records) -> dict[str, Tier | None]:
    out: dict[str, Tier | None] = {}
    for rec in records:
        out[rec.pitch_id] = rec.point_label()
    return out


def _labels_vs_truth(records, bench) -> tuple[list[Tier], list[Tier], list[str]]:
    """(preds, truths, unresolved_ids) over benchmark pitches, sorted by id.

    Unresolved predictions (tied majorities, unparsed labels) are excluded
    from the confusion matrix but reported so the caller can count them
    against the full denominator.
    """
    truths = bench.truths()
    matched, _ = ingest.match_predictions(list(records), bench)
    labels = _point_labels(matched)
    preds, golds, unresolved = [], [], []
    for pid in sorted(labels):
        lab = labels[pid]
        if lab is None:
            unresolved.append(pid)
        else:
            preds.append(lab)
            golds.append(truths[pid])
    return preds, golds, unresolved


def _confidence_rows(records, bench) -> tuple[list[float], list[bool], list[str]]:
    truths = bench.truths()
    matched, _ = ingest.match_predictions(list(records), bench)
    rows = []
    for rec in sorted(matched, key=lambda r: r.pitch_id):
        label = rec.point_label()
        conf = calibrate.confidence_of(rec)
        rows.append((conf, label is not None and label == truths[rec.pitch_id],
                     rec.pitch_id))
    if not rows:
        raise ValidationError("no predictions matched the benchmark")
    confs = [r[0] for r in rows]
    flags = [r[1] for r in rows]
    ids = [r[2] for r in rows]
    return confs, flags, ids


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_ingest(run: RunDir, args) -> None:
    summary: dict = {}
    if args.bench:
        bench = _load_bench(run, args.bench)
        summary["benchmark"] = {
            "id": bench.id,
            "n": len(bench),
            "chance": bench.chance,
            "per_tier": {t.label: c for t, c in bench.tier_counts().items()},
        }
        if args.csv:
            p = run.path_for("pitches.csv")
            p.write_text(ingest.pitches_to_csv(bench), encoding="utf-8")
    pred_blocks = []
    for path in args.pred or []:
        records, meta = _load_preds(run, path)
        block = {
            "path": str(path),
            "evaluator": _evaluator_name(records, meta, Path(path).stem),
            "n": len(records),
            "kinds": sorted({r.kind for r in records}),
        }
        if args.bench:
            _, unknown = ingest.match_predictions(records, bench)
            block["unknown_pitch_ids"] = unknown
        pred_blocks.append(block)
        if args.csv:
            p = run.path_for(f"{Path(path).stem}.csv")
            p.write_text(ingest.predictions_to_csv(records), encoding="utf-8")
    if pred_blocks:
        summary["predictions"] = pred_blocks
    if args.ratings:
        records = ingest.load_ratings(run.track_input(args.ratings))
        kept, excluded = records, []
        if args.min_avg_seconds is not None:
            kept, excluded = ingest.filter_raters_by_time(
                records, args.min_avg_seconds)
        summary["ratings"] = {
            "path": str(args.ratings),
            "n_ratings": len(records),
            "n_raters": len({r.rater_id for r in records}),
            "excluded_raters": excluded,
            "n_after_filter": len(kept),
        }
        if args.csv:
            p = run.path_for("ratings.csv")
            p.write_text(ingest.ratings_to_csv(kept), encoding="utf-8")
    if not summary:
        raise ValidationError("nothing to ingest; pass --bench, --pred, "
                              "or --ratings")
    run.write_json("ingest.json", summary)


def _mock_transport() -> collect.MockTransport:
    # offline dry-run: deterministic per-pitch logprobs / sampled labels
    def script(payload: dict, index: int) -> dict:
        text = payload["messages"][0]["content"]
        h = int(hashlib.sha256(text.encode()).hexdigest(), 16)
        if payload.get("logprobs"):
            ranks = [(h >> (8 * i)) % 97 for i in range(4)]
            return collect.logprob_response(
                {t.label.capitalize(): -1.0 - r / 10.0
                 for t, r in zip(TIER_ORDER, ranks)})
        return collect.text_response(TIER_ORDER[h % 4].label.capitalize())

    return collect.MockTransport(script=script)


def cmd_collect(run: RunDir, args) -> None:
    bench = _load_bench(run, args.bench)
    if args.prompt in collect.list_prompts():
        prompt = collect.load_prompt(args.prompt)
    else:
        prompt = run.track_input(args.prompt).read_text(encoding="utf-8")
    config = collect.EndpointConfig(
        base_url=args.base_url, model=args.model,
        api_key_env=args.api_key_env, max_concurrent=args.max_concurrent,
        requests_per_minute=args.rpm, timeout_s=args.timeout,
        max_retries=args.retries)
    transport = _mock_transport() if args.mock else collect.HttpTransport(config)
    cache = collect.ResponseCache(args.cache_dir or run.out / "cache")
    collector = collect.Collector(config, transport, cache)
    # the journal is a crash-recovery log; start each run fresh
    journal = run.path_for("collect_journal.jsonl")
    journal.write_text("", encoding="utf-8")
    records, manifest = collector.collect_benchmark(
        bench, prompt, mode=args.mode, n_samples=args.n_samples,
        temperature=args.temperature, evaluator_id=args.evaluator_id,
        journal_path=journal)
    ingest.save_predictions(records, run.path_for("predictions.jsonl"),
                            meta=manifest)
    run.write_json("collect.json", manifest)
    if manifest["failures"]:
        raise TransportError(
            f"{len(manifest['failures'])} pitches failed; see collect.json")


def cmd_classify(run: RunDir, args) -> None:
    records, meta = _load_preds(run, args.pred)
    rows = []
    for rec in sorted(records, key=lambda r: (r.pitch_id, r.evaluator_id)):
        label = rec.point_label()
        if rec.kind == "sampled":
            _, tied = classify.runs_majority([t for _, t in rec.runs])
        elif rec.distribution is not None:
            _, tied = rec.distribution.argmax()
        else:
            tied = False
        rows.append({"pitch_id": rec.pitch_id,
                     "evaluator_id": rec.evaluator_id,
                     "kind": rec.kind,
                     "label": label.label if label else None,
                     "tied": tied})
    ingest.write_jsonl(run.path_for("labels.jsonl"), rows,
                       meta={"kind": "labels", "source": str(args.pred)})
    summary = {
        "n": len(rows),
        "n_unresolved": sum(1 for r in rows if r["label"] is None),
        "label_counts": {t.label: sum(1 for r in rows if r["label"] == t.label)
                         for t in TIER_ORDER},
    }
    if args.bench:
        bench = _load_bench(run, args.bench)
        preds, golds, unresolved = _labels_vs_truth(records, bench)
        n_all = len(preds) + len(unresolved)
        correct = sum(p == g for p, g in zip(preds, golds))
        summary["accuracy_resolved"] = correct / len(preds) if preds else 0.0
        summary["accuracy_full_denominator"] = correct / n_all if n_all else 0.0
    run.write_json("classify.json", summary)


def cmd_metrics(run: RunDir, args) -> None:
    bench = _load_bench(run, args.bench)
    records, meta = _load_preds(run, args.pred)
    preds, golds, unresolved = _labels_vs_truth(records, bench)
    if not preds:
        raise ValidationError("no resolved predictions to score")
    cm = metrics_mod.confusion(preds, golds)
    rep = metrics_mod.summarize(cm, bench.chance, ci_method=args.ci)
    out = rep.to_json_dict()
    out["evaluator"] = _evaluator_name(records, meta, Path(args.pred).stem)
    out["confusion"] = cm.counts
    out["error_profile"] = metrics_mod.error_profile(preds, golds)
    out["entropy"] = metrics_mod.prediction_entropy(rep.predicted_counts)
    if unresolved:
        out["n_unresolved"] = len(unresolved)
        correct = sum(p == g for p, g in zip(preds, golds))
        out["accuracy_full_denominator"] = correct / (len(preds) + len(unresolved))
    if args.bootstrap_f1:
        low, high = metrics_mod.macro_f1_bootstrap_ci(
            preds, golds, draws=args.draws, seed=args.seed)
        out["macro_f1_ci"] = {"low": low, "high": high, "method": "bootstrap"}
    run.write_json("metrics.json", out)
    run.write_json("confusion_grid.json", {
        "rows": [t.label for t in TIER_ORDER],
        "cols": [t.label for t in TIER_ORDER],
        "counts": cm.counts,
        "row_normalized": cm.row_normalized(),
    })


def cmd_calibrate(run: RunDir, args) -> None:
    bench = _load_bench(run, args.bench)
    records, _ = _load_preds(run, args.pred)
    confs, flags, ids = _confidence_rows(records, bench)
    matched, _ = ingest.match_predictions(records, bench)
    matched = sorted(matched, key=lambda r: r.pitch_id)
    dists = [r.distribution for r in matched]
    truths = bench.truths()
    golds = [truths[r.pitch_id] for r in matched]
    have_dists = all(d is not None for d in dists)
    rep = calibrate.calibration_report(
        confs, flags,
        distributions=dists if have_dists else None,
        truths=golds if have_dists else None,
        n_bins=args.bins)
    run.write_json("calibration.json", rep.to_json_dict())
    run.write_json("reliability_bins.json", {
        "bins": [{"low": b.low, "high": b.high, "count": b.count,
                  "mean_confidence": b.mean_confidence, "accuracy": b.accuracy}
                 for b in rep.bins]})
    curve = calibrate.selective_curve(confs, flags, ids=ids)
    run.write_json("selective_curve.json", curve.to_json_dict())


def cmd_agreement(run: RunDir, args) -> None:
    if bool(args.ratings) == bool(args.pred):
        raise ValidationError("pass either --ratings or --pred files, not both")
    if args.ratings:
        records = ingest.load_ratings(run.track_input(args.ratings),
                                      min_avg_seconds=args.min_avg_seconds)
        rep = stats.agreement_report(
            per_pitch_ratings=ingest.ratings_by_pitch(records))
    else:
        by_evaluator: dict[str, dict[str, Tier]] = {}
        for path in args.pred:
            records, meta = _load_preds(run, path)
            name = _evaluator_name(records, meta, Path(path).stem)
            by_evaluator[name] = {
                pid: lab for pid, lab in _point_labels(records).items()
                if lab is not None}
        common = set.intersection(*(set(v) for v in by_evaluator.values()))
        if not common:
            raise ValidationError("no pitch is resolved by every evaluator")
        order = sorted(common)
        rep = stats.agreement_report(labels_by_evaluator={
            name: {pid: labels[pid] for pid in order}
            for name, labels in sorted(by_evaluator.items())})
    run.write_json("agreement.json", rep.to_json_dict())


def cmd_stats(run: RunDir, args) -> None:
    """Paired-comparison compendium over several prediction files."""
    bench = _load_bench(run, args.bench)
    truths = bench.truths()
    evaluators = []
    for path in args.pred:
        records, meta = _load_preds(run, path)
        name = _evaluator_name(records, meta, Path(path).stem)
        labels = _point_labels(
            ingest.match_predictions(records, bench)[0])
        correct = {pid: lab == truths[pid]
                   for pid, lab in labels.items() if lab is not None}
        k, n = sum(correct.values()), len(correct)
        low, high = stats.wilson_ci(k, n) if n else (0.0, 0.0)
        evaluators.append({"name": name, "path": str(path), "n": n,
                           "correct": k, "accuracy": k / n if n else 0.0,
                           "wilson_ci": {"low": low, "high": high},
                           "_flags": correct})
    pairs = []
    for a, b in itertools.combinations(evaluators, 2):
        common = sorted(set(a["_flags"]) & set(b["_flags"]))
        if not common:
            continue
        fa = [a["_flags"][pid] for pid in common]
        fb = [b["_flags"][pid] for pid in common]
        exact = stats.mcnemar(fa, fb, mode="exact")
        cc = stats.mcnemar(fa, fb, mode="cc")
        pairs.append({"a": a["name"], "b": b["name"], "n_common": len(common),
                      "b_count": exact.details["b"], "c_count": exact.details["c"],
                      "exact": {"statistic": exact.statistic, "p": exact.p},
                      "cc": {"statistic": cc.statistic, "p": cc.p}})
    if pairs:
        adjusted = stats.holm_adjust([p["exact"]["p"] for p in pairs])
        for row, adj in zip(pairs, adjusted):
            row["exact"]["p_holm"] = adj
    for ev in evaluators:
        del ev["_flags"]
    run.write_json("stats.json", {"evaluators": evaluators, "pairs": pairs})


_POLICY_RE = re.compile(r"^(\d+)of(\d+)$")


def parse_policy(text: str) -> aggregate.ConsensusPolicy:
    """'3of4' | 'share>=0.75' | 'unanimity>=3' -> ConsensusPolicy."""
    m = _POLICY_RE.match(text)
    if m:
        return aggregate.ConsensusPolicy(kind="k_of_n", k=int(m.group(1)),
                                         n=int(m.group(2)))
    if text.startswith("share>="):
        return aggregate.ConsensusPolicy(kind="vote_share",
                                         share=float(text[len("share>="):]))
    if text.startswith("unanimity>="):
        return aggregate.ConsensusPolicy(
            kind="unanimity_min_raters",
            min_raters=int(text[len("unanimity>="):]))
    raise ValidationError(f"cannot parse policy {text!r}; expected forms "
                          "like 3of4, share>=0.75, unanimity>=3")


def _labels_per_pitch(run: RunDir, pred_paths, bench) -> dict[str, list[Tier]]:
    per_pitch: dict[str, list[Tier]] = {pid: [] for pid in bench.truths()}
    for path in pred_paths:
        records, _ = _load_preds(run, path)
        matched, _ = ingest.match_predictions(records, bench)
        for pid, lab in _point_labels(matched).items():
            if lab is not None:
                per_pitch[pid].append(lab)
    return per_pitch


def cmd_consensus(run: RunDir, args) -> None:
    bench = _load_bench(run, args.bench)
    per_pitch = _labels_per_pitch(run, args.pred, bench)
    reports = []
    for text in args.policy:
        policy = parse_policy(text)
        rep = aggregate.consensus_filter(per_pitch, bench.truths(), policy)
        reports.append(json.loads(rep.to_json()))
    run.write_json("consensus.json", {"policies": reports})
    run.write_json("coverage_accuracy.json", {
        "points": [{"policy": r["policy"], "coverage": r["coverage"],
                    "accuracy": r["accuracy"]} for r in reports]})


def cmd_ensemble(run: RunDir, args) -> None:
    bench = _load_bench(run, args.bench)
    truths = bench.truths()
    members: dict[str, dict[str, object]] = {}
    for path in args.pred:
        records, meta = _load_preds(run, path)
        matched, _ = ingest.match_predictions(records, bench)
        name = _evaluator_name(matched, meta, Path(path).stem)
        dists = {}
        for rec in matched:
            if rec.distribution is None:
                raise ValidationError(
                    f"{path}: record {rec.pitch_id} has no distribution; "
                    "ensembles need logprob-style predictions")
            dists[rec.pitch_id] = rec.distribution
        missing = sorted(set(truths) - set(dists))
        if missing:
            raise ValidationError(f"{path}: missing pitches {missing[:5]}")
        members[name] = dists
    names = sorted(members)
    weights = None
    if args.weights:
        if not args.members:
            raise ValidationError("--weights needs --members")
        weights = [float(w) for w in args.weights.split(",")]
    if args.members:
        wanted = args.members.split(",")
        bad = sorted(set(wanted) - set(names))
        if bad:
            raise ValidationError(f"unknown ensemble members: {bad}")
        if weights is not None and len(weights) != len(wanted):
            raise ValidationError(f"{len(weights)} weights for "
                                  f"{len(wanted)} members")
        combos = [tuple(wanted)]
    else:
        combos = [c for size in range(2, len(names) + 1)
                  for c in itertools.combinations(names, size)]
    candidates = []
    for combo in combos:
        spec = aggregate.EnsembleSpec(member_ids=combo, weights=(
            tuple(w / sum(weights) for w in weights) if weights else None))
        preds, golds = [], []
        for pid in sorted(truths):
            pred = aggregate.ensemble_average(
                [members[m][pid] for m in combo],
                weights=list(spec.weights) if spec.weights else None,
                pitch_id=pid)
            preds.append(pred.label)
            golds.append(truths[pid])
        cm = metrics_mod.confusion(preds, golds)
        rep = metrics_mod.summarize(cm, bench.chance)
        candidates.append((spec, rep.accuracy, rep.macro_f1))
    ranked = aggregate.rank_ensembles(candidates)
    run.write_json("ensembles.json", {"ranked": [
        {"members": list(spec.member_ids),
         "weights": list(spec.weights) if spec.weights else None,
         "accuracy": acc, "macro_f1": f1}
        for spec, acc, f1 in ranked]})


def _load_choices(run: RunDir, path) -> dict[str, str]:
    _, rows = ingest._iter_jsonl(run.track_input(path))
    choices = {}
    for lineno, row in rows:
        if "pair_id" not in row or "choice" not in row:
            raise SchemaError("choice rows need pair_id and choice",
                              line=lineno)
        choices[str(row["pair_id"])] = str(row["choice"])
    return choices


def cmd_pairwise(run: RunDir, args) -> None:
    if args.action == "build":
        bench = _load_bench(run, args.bench)
        strata = None
        if args.strata:
            counts = [int(x) for x in args.strata.split(",")]
            if len(counts) != 3:
                raise ValidationError("--strata wants three comma-separated "
                                      "counts (distance 1,2,3)")
            strata = dict(zip((1, 2, 3), counts))
        pairs = pairwise_mod.build_pairs(bench, seed=args.seed, strata=strata)
        pairwise_mod.save_pairs(pairs, run.path_for("pairs.jsonl"))
        run.write_json("pairwise.json", {
            "benchmark_id": pairs.benchmark_id, "seed": pairs.seed,
            "n_pairs": len(pairs.items),
            "per_distance": {str(d): sum(1 for it in pairs.items
                                         if it.distance == d)
                             for d in (1, 2, 3)}})
        return
    pairs = pairwise_mod.load_pairs(run.track_input(args.pairs))
    if args.action == "score":
        score = pairwise_mod.score_pairs(_load_choices(run, args.choices), pairs)
        run.write_json("pair_score.json", score.to_json_dict())
        return
    # discord
    report = pairwise_mod.discordance(_load_choices(run, args.choices_a),
                                      _load_choices(run, args.choices_b), pairs)
    test = report.pop("mcnemar")
    out = dict(report)
    out["mcnemar"] = {"statistic": test.statistic, "p": test.p,
                      "details": test.details}
    run.write_json("discordance.json", out)


def cmd_rlsim(run: RunDir, args) -> None:
    config = rlsim.TrainConfig(
        steps=args.steps, n_prompts=args.n_prompts, g=args.g,
        token_count=args.token_count, lr=args.lr, seed=args.seed,
        router=rlsim.RouterConfig(k=args.router_k, tau=args.router_tau),
        clip=rlsim.ClipParams(eps=args.eps, eps_higher=args.eps_higher),
        hint_strength=args.hint_strength)
    summary = rlsim.run_training(config, log_path=run.path_for("trace.jsonl"))
    run.write_json("rlsim.json", summary)


def cmd_report(run: RunDir, args) -> None:
    """Bundle metrics, calibration, agreement, consensus, ensemble ranking,
    and a pairwise build into one directory."""
    bench = _load_bench(run, args.bench)
    truths = bench.truths()
    table = []
    evaluator_records = {}
    for path in args.pred:
        records, meta = _load_preds(run, path)
        name = _evaluator_name(records, meta, Path(path).stem)
        evaluator_records[name] = records
        preds, golds, unresolved = _labels_vs_truth(records, bench)
        if not preds:
            continue
        cm = metrics_mod.confusion(preds, golds)
        rep = metrics_mod.summarize(cm, bench.chance, ci_method="normal")
        row = rep.to_json_dict()
        row["evaluator"] = name
        row["confusion"] = cm.counts
        row["n_unresolved"] = len(unresolved)
        table.append(row)
    run.write_json("metrics_table.json", {"evaluators": table})

    per_pitch = _labels_per_pitch(run, args.pred, bench)
    policies = args.policy or ["2of{n}", "3of{n}", "{n}of{n}"]
    n_members = len(args.pred)
    reports = []
    for text in policies:
        text = text.format(n=n_members)
        policy = parse_policy(text)
        rep = aggregate.consensus_filter(per_pitch, truths, policy)
        reports.append(json.loads(rep.to_json()))
    run.write_json("consensus_table.json", {"policies": reports})

    labels_per_evaluator = {
        name: {pid: lab for pid, lab in _point_labels(recs).items()
               if lab is not None and pid in truths}
        for name, recs in evaluator_records.items()}
    if len(labels_per_evaluator) >= 2:
        common = set.intersection(
            *(set(v) for v in labels_per_evaluator.values()))
        if common:
            order = sorted(common)
            agree = stats.agreement_report(labels_by_evaluator={
                name: {pid: labels[pid] for pid in order}
                for name, labels in sorted(labels_per_evaluator.items())})
            run.write_json("agreement.json", agree.to_json_dict())

    members = {}
    for name, recs in evaluator_records.items():
        matched, _ = ingest.match_predictions(recs, bench)
        dists = {r.pitch_id: r.distribution for r in matched
                 if r.distribution is not None}
        if set(dists) == set(truths):
            members[name] = dists
    if len(members) >= 2:
        names = sorted(members)
        candidates = []
        for size in range(2, len(names) + 1):
            for combo in itertools.combinations(names, size):
                spec = aggregate.EnsembleSpec(member_ids=combo)
                preds, golds = [], []
                for pid in sorted(truths):
                    pred = aggregate.ensemble_average(
                        [members[m][pid] for m in combo], pitch_id=pid)
                    preds.append(pred.label)
                    golds.append(truths[pid])
                cm = metrics_mod.confusion(preds, golds)
                rep = metrics_mod.summarize(cm, bench.chance)
                candidates.append((spec, rep.accuracy, rep.macro_f1))
        ranked = aggregate.rank_ensembles(candidates)
        run.write_json("ensemble_table.json", {"ranked": [
            {"members": list(spec.member_ids), "accuracy": acc,
             "macro_f1": f1} for spec, acc, f1 in ranked]})

    pairs = pairwise_mod.build_pairs(bench, seed=args.seed)
    pairwise_mod.save_pairs(pairs, run.path_for("pairs.jsonl"))


# ---------------------------------------------------------------------------
# Parser


def _add_out(p: _Parser) -> None:
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--config", default=None,
                   help="JSON file of defaults; explicit flags win")


def build_parser() -> _Parser:
    parser = _Parser(prog="tierbench",
                     description="Four-tier research-pitch evaluation toolkit")
    parser.add_argument("--version", action="version",
                        version=f"tierbench {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", help="validate and summarize input files")
    p.add_argument("--bench")
    p.add_argument("--pred", nargs="*", default=[])
    p.add_argument("--ratings")
    p.add_argument("--min-avg-seconds", type=float, default=None)
    p.add_argument("--csv", action="store_true",
                   help="also write CSV mirrors")
    _add_out(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("collect", help="query an endpoint for predictions")
    p.add_argument("--bench", required=True)
    p.add_argument("--prompt", required=True,
                   help="bundled prompt name or a path to a prompt file")
    p.add_argument("--mode", choices=("logprob", "sampled"), default="logprob")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--model", required=True)
    p.add_argument("--api-key-env", default="OPENAI_API_KEY")
    p.add_argument("--evaluator-id", default=None)
    p.add_argument("--n-samples", type=int, default=8)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--rpm", type=float, default=600.0)
    p.add_argument("--max-concurrent", type=int, default=4)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=4)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--mock", action="store_true",
                   help="offline dry run against a deterministic transport")
    _add_out(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("classify", help="reduce predictions to point labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--bench")
    _add_out(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("metrics", help="accuracy, macro-F1, confusion")
    p.add_argument("--pred", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--ci", choices=("normal", "wilson", "clopper_pearson"),
                   default="normal")
    p.add_argument("--bootstrap-f1", action="store_true")
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("calibrate", help="ECE, Brier, selective accuracy")
    p.add_argument("--pred", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--bins", type=int, default=10)
    _add_out(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("agreement", help="inter-rater agreement coefficients")
    p.add_argument("--ratings")
    p.add_argument("--min-avg-seconds", type=float, default=None)
    p.add_argument("--pred", nargs="*", default=[])
    _add_out(p)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("stats", help="paired McNemar compendium")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--bench", required=True)
    _add_out(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("consensus", help="coverage/accuracy under vote policies")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--policy", nargs="+", required=True,
                   help="e.g. 3of4 share>=0.75 unanimity>=3")
    _add_out(p)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("ensemble", help="build and rank weighted ensembles")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--members", default=None,
                   help="comma-separated evaluator names; default: all subsets")
    p.add_argument("--weights", default=None,
                   help="comma-separated weights matching --members")
    _add_out(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("pairwise", help="pairwise discrimination tasks")
    psub = p.add_subparsers(dest="action", required=True)
    b = psub.add_parser("build", help="sample a stratified pair set")
    b.add_argument("--bench", required=True)
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--strata", default=None, help="e.g. 150,100,50")
    _add_out(b)
    b.set_defaults(func=cmd_pairwise)
    s = psub.add_parser("score", help="score recorded choices")
    s.add_argument("--pairs", required=True)
    s.add_argument("--choices", required=True)
    _add_out(s)
    s.set_defaults(func=cmd_pairwise)
    d = psub.add_parser("discord", help="paired discordance of two choice sets")
    d.add_argument("--pairs", required=True)
    d.add_argument("--choices-a", required=True)
    d.add_argument("--choices-b", required=True)
    _add_out(d)
    d.set_defaults(func=cmd_pairwise)

    p = sub.add_parser("rlsim", help="toy GRPO training simulation")
    p.add_argument("--steps", type=int, default=60)
    p.add_argument("--n-prompts", type=int, default=8)
    p.add_argument("--g", type=int, default=8)
    p.add_argument("--token-count", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--router-k", type=int, default=8)
    p.add_argument("--router-tau", type=float, default=0.25)
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--eps-higher", type=float, default=0.1)
    p.add_argument("--hint-strength", type=float, default=2.0)
    _add_out(p)
    p.set_defaults(func=cmd_rlsim)

    p = sub.add_parser("report", help="bundle every analysis into one directory")
    p.add_argument("--bench", required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--policy", nargs="*", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_report)

    return parser


def _walk_parsers(parser):
    """The parser plus every descendant subcommand parser."""
    stack = [parser]
    while stack:
        p = stack.pop()
        yield p
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(dict.fromkeys(action.choices.values()))


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except OSError as exc:
            print(f"tierbench: error: cannot read config: {exc}",
                  file=sys.stderr)
            return 2
        except ValueError as exc:
            print(f"tierbench: error: bad config JSON: {exc}", file=sys.stderr)
            return 1
        if not isinstance(overrides, dict):
            print("tierbench: error: config must be a JSON object",
                  file=sys.stderr)
            return 1
        bad = sorted(set(overrides)
                     - (set(vars(args)) - {"func", "subcommand", "config"}))
        if bad:
            print(f"tierbench: error: config keys not recognized for "
                  f"{args.subcommand!r}: {', '.join(bad)}", file=sys.stderr)
            return 1
        # config supplies defaults; anything given on the command line wins.
        # Seeding a namespace is not enough: each subparser parses into a
        # fresh namespace whose action defaults clobber seeded values on
        # merge, so rewrite the defaults on every parser in the tree.
        for p in _walk_parsers(parser):
            p.set_defaults(**overrides)
        args = parser.parse_args(argv)
    run = RunDir(Path(args.out), args.subcommand, argv,
                 seed=getattr(args, "seed", None))
    try:
        args.func(run, args)
    except ValidationError as exc:
        run.finish(status="error", error=f"{type(exc).__name__}: {exc}")
        print(f"tierbench: error: {exc}", file=sys.stderr)
        return 1
    except (TransportError, AuthError, PartialCollection, OSError) as exc:
        run.finish(status="error", error=f"{type(exc).__name__}: {exc}")
        print(f"tierbench: error: {exc}", file=sys.stderr)
        return 2
    except TierBenchError as exc:
        run.finish(status="error", error=f"{type(exc).__name__}: {exc}")
        print(f"tierbench: error: {exc}", file=sys.stderr)
        return 1
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())

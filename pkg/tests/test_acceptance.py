"""Acceptance suite: every criterion runs at its stated tolerance and
prints one pass/fail line. Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import itertools
import json
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import stats

from litmine.analysis import GroupedLabels, aggregate_eta2, coverage, disagreement, eta_squared
from litmine.corpus import HashingEmbedder
from litmine.extraction import ExtractionRecord
from litmine.filters import Probe, evaluate_filter, parse_filter_spec, probe_search
from litmine.index import build_index
from litmine.judge import filter_records, judge_record, DEFAULT_RUBRIC
from litmine.judge_axes import AXIS_KEYS
from litmine.oracles import AgentRole, FunctionOracle, RoleRouter, ScriptedOracle
from litmine.probe_loop import (
    LoopConfig,
    derive_seed,
    estimate_precision,
    run_probe_loop,
)
from litmine.tags import DictionaryResolver, EntityType, OntologyEntry, ResolverCascades, TagStore, load_tags
from litmine.cli import main as cli_main

from conftest import corpus_of_texts, write_jsonl
from golden import digest_tree, write_golden_fixture


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL")
        raise
    print(f"[acceptance] {name}: PASS")


# --------------------------------------------------------------------------
# 1. Filter/scan equivalence on 200 random corpora
# --------------------------------------------------------------------------

TYPE_POOL = {EntityType.SMALL_MOLECULE: "SmallMolecule",
             EntityType.DISEASE: "Disease",
             EntityType.GENE: "Gene"}


def random_case(rng):
    universe = rng.randrange(1, 1001)
    n_entities = rng.randrange(1, 31)
    names = [f"e{i}" for i in range(n_entities)]
    window_keys = [set() for _ in range(universe)]
    window_types = [set() for _ in range(universe)]
    entries = []
    for name in names:
        entity_type = rng.choice(list(TYPE_POOL))
        count = rng.randrange(0, universe)
        ordinals = rng.sample(range(universe), count)
        entries.append((f"raw:{name}", entity_type, ordinals))
        for o in ordinals:
            window_keys[o].add(f"raw:{name}")
            window_types[o].add(TYPE_POOL[entity_type])
    index = build_index(TagStore.from_postings(universe, entries))
    groups = []
    for _ in range(rng.randrange(0, 4)):
        group = []
        for _ in range(rng.randrange(1, 4)):
            literal = rng.choice(names + list(TYPE_POOL.values()))
            if rng.random() < 0.35:
                literal = "!" + literal
            group.append(literal)
        groups.append(group)
    return universe, index, groups, window_keys, window_types


def predicate(groups, keys, types):
    for group in groups:
        satisfied = False
        for literal in group:
            negated = literal.startswith("!")
            name = literal[1:] if negated else literal
            present = (name in types) if name in TYPE_POOL.values() \
                else (f"raw:{name.lower()}" in keys)
            if present != negated:
                satisfied = True
                break
        if not satisfied:
            return False
    return True


def test_c1_filter_scan_equivalence():
    with criterion("C1 filter/scan equivalence (200 corpora)"):
        start = time.perf_counter()
        for seed in range(200):
            rng = random.Random(seed)
            universe, index, groups, window_keys, window_types = random_case(rng)
            spec = parse_filter_spec({"entity_groups": groups, "semantic_query": "q"})
            got = set(evaluate_filter(spec, index).to_array().tolist())
            expected = {w for w in range(universe)
                        if predicate(groups, window_keys[w], window_types[w])}
            assert got == expected, f"seed {seed}"
        elapsed = time.perf_counter() - start
        print(f"  200 corpora checked in {elapsed:.1f}s")
        assert elapsed < 60.0


# --------------------------------------------------------------------------
# 2. Barrier-probe replay on a 12-document planted fixture
# --------------------------------------------------------------------------

BARRIER_PROBE_JSON = {
    "entity_groups": [
        ["SmallMolecule"],
        ["blood-brain barrier", "cerebrospinal fluid"],
    ],
    "semantic_query": (
        "Reported blood-brain barrier (BBB) permeability or brain penetration "
        "status for a named compound, including statements that the compound "
        "crosses/penetrates or does not cross the BBB (permeable/impermeable), "
        "or quantitative measures such as brain-to-plasma ratio (Kp), CSF "
        "concentration, logBB, in situ brain perfusion, microdialysis, "
        "PAMPA-BBB/MDCK permeability used as evidence of BBB penetration."),
}


def barrier_fixture(tmp_path):
    embedder = HashingEmbedder(dim=256)
    query = BARRIER_PROBE_JSON["semantic_query"]
    texts = {}
    # planted: small molecule AND barrier/fluid tags (p0..p3)
    texts["p0"] = "aspirin was shown to cross the barrier in mice"
    texts["p1"] = query  # verbatim query text: must rank first
    texts["p2"] = "caffeine distribution into the fluid was measured"
    texts["p3"] = "propranolol brain uptake study"
    # decoys: molecule only, barrier only, untagged
    texts["m0"] = "aspirin pharmacokinetics in plasma"
    texts["m1"] = "caffeine content of beverages"
    texts["b0"] = "imaging the barrier with tracers"
    texts["b1"] = query + " (survey, no specific compound tagged)"
    for i in range(4):
        texts[f"u{i}"] = f"unrelated botany paragraph {i}"
    corpus = corpus_of_texts(texts, embedder)
    assert len(corpus.documents) == 12

    chem = DictionaryResolver("chem", [
        OntologyEntry("CHEM:1", "aspirin", ("acetylsalicylic acid",),
                      EntityType.SMALL_MOLECULE),
        OntologyEntry("CHEM:2", "caffeine", (), EntityType.SMALL_MOLECULE),
        OntologyEntry("CHEM:3", "propranolol", (), EntityType.SMALL_MOLECULE),
    ])
    anat = DictionaryResolver("anat", [
        OntologyEntry("ANAT:1", "blood-brain barrier", ("BBB",), EntityType.ANATOMY),
        OntologyEntry("ANAT:2", "cerebrospinal fluid", ("CSF",), EntityType.ANATOMY),
    ])
    cascades = ResolverCascades({EntityType.SMALL_MOLECULE: [chem]}, [anat])

    def tag(doc, name, entity_type):
        return {"doc_id": doc, "start_para": 0, "para_count": 1,
                "canonical_name": name, "entity_type": entity_type,
                "synonyms": [], "surface_forms": [name],
                "paragraph_indices": [0], "extras": {}}

    rows = [
        tag("p0", "aspirin", "SmallMolecule"), tag("p0", "blood-brain barrier", "Anatomy"),
        tag("p1", "propranolol", "SmallMolecule"), tag("p1", "BBB", "Anatomy"),
        tag("p2", "caffeine", "SmallMolecule"), tag("p2", "CSF", "Anatomy"),
        tag("p3", "propranolol", "SmallMolecule"), tag("p3", "blood-brain barrier", "Anatomy"),
        tag("m0", "aspirin", "SmallMolecule"),
        tag("m1", "caffeine", "SmallMolecule"),
        tag("b0", "blood-brain barrier", "Anatomy"),
        tag("b1", "cerebrospinal fluid", "Anatomy"),
    ]
    tags_path = write_jsonl(tmp_path / "tags.jsonl", rows)
    store = load_tags(tags_path, corpus, cascades)
    return corpus, build_index(store), embedder


def test_c2_barrier_probe_replay(tmp_path):
    with criterion("C2 barrier-probe replay (planted 12-doc fixture)"):
        corpus, index, embedder = barrier_fixture(tmp_path)
        spec = parse_filter_spec(json.dumps(BARRIER_PROBE_JSON))
        matched = evaluate_filter(spec, index)
        planted = {corpus.window_ordinals_for_doc(d)[0] for d in ("p0", "p1", "p2", "p3")}
        assert set(matched.to_array().tolist()) == planted
        hits = probe_search(Probe("barrier", spec), index, corpus, embedder, top_k=12)
        assert {h.doc_id for h in hits} == {"p0", "p1", "p2", "p3"}
        assert hits[0].doc_id == "p1"  # verbatim-query window ranks first


# --------------------------------------------------------------------------
# 3. Probe-loop thresholds on a 500-document plant
# --------------------------------------------------------------------------

def plant_500(embedder):
    texts = {f"s{i:03d}": f"study {i} of transport across membranes {i % 11}"
             for i in range(500)}
    corpus = corpus_of_texts(texts, embedder)
    entries = [
        ("raw:target", EntityType.SMALL_MOLECULE, list(range(250))),
        ("raw:marker", EntityType.ANATOMY, list(range(150))),
        ("raw:decoy", EntityType.GENE, list(range(300, 350))),
    ]
    index = build_index(TagStore.from_postings(500, entries))
    relevant = {corpus.window(i).window_id for i in range(150)}
    return corpus, index, relevant


def probes_payload(specs):
    return {"probes": [
        {"probe_id": pid,
         "spec": {"entity_groups": groups, "semantic_query": "transport across membranes"}}
        for pid, groups in specs]}


SCHEMA_PAYLOAD = {
    "fields": [{"name": "compound", "kind": "string", "required": True},
               {"name": "label", "kind": "string", "required": True}],
    "task_instantiation": "one record per explicit transport statement",
}


def loop_oracle(proposer_entries, relevant):
    def validator(req):
        if req.kind == "judge_relevance":
            return {"relevant": req.payload["window_id"] in relevant}
        return {"pass": True}

    return RoleRouter({
        AgentRole.PROPOSER: ScriptedOracle(proposer_entries),
        AgentRole.VALIDATOR: FunctionOracle(validator),
        AgentRole.INVESTIGATOR: FunctionOracle(lambda req: {"suggestions": ["narrow"]}),
        AgentRole.EXTRACTOR: FunctionOracle(
            lambda req: {"records": [{"fields": {"compound": "x", "label": "y"},
                                      "support_text": "s"}]}),
    })


def test_c3_probe_loop_thresholds(embedder):
    with criterion("C3a probe loop reaches thresholds on the plant"):
        corpus, index, relevant = plant_500(embedder)
        proposer = [
            {"role": "Proposer", "kind": "propose_probes",
             "response": probes_payload([("loose", [["target"]])])},
            {"role": "Proposer", "kind": "revise_probes",
             "response": probes_payload([("tight", [["target"], ["marker"]])])},
            {"role": "Proposer", "kind": "propose_schema", "response": SCHEMA_PAYLOAD},
        ]
        config = LoopConfig(rng_seed=11, precision_sample_n=50, recall_pool_n=50,
                            max_probes=8, max_iterations=10, schema_sample_docs=5,
                            schema_validate_n=3)
        report = run_probe_loop("find transport data", loop_oracle(proposer, relevant),
                                index, corpus, embedder, config)
        assert report.termination == "thresholds_met"

        # measured against the plant, not the estimates:
        final_matches = set()
        for probe in report.probes:
            final_matches |= set(evaluate_filter(probe.spec, index).to_array().tolist())
        matched_ids = {corpus.window(o).window_id for o in final_matches}
        true_precision = len(matched_ids & relevant) / len(matched_ids)
        assert true_precision >= 0.80
        excluded_relevant = relevant - matched_ids
        true_recall_gap = len(excluded_relevant) / len(relevant)
        assert true_recall_gap <= 0.15
        print(f"  true precision {true_precision:.3f}, true recall gap {true_recall_gap:.3f}")

    with criterion("C3b unhelpful proposer terminates probe_cap at 8"):
        corpus, index, relevant = plant_500(embedder)

        def junk(k):
            return probes_payload([(f"junk{i}", [["decoy"]]) for i in range(k)])

        proposer = [
            {"role": "Proposer", "kind": "propose_probes", "response": junk(2)},
            {"role": "Proposer", "kind": "revise_probes", "response": junk(4)},
            {"role": "Proposer", "kind": "revise_probes", "response": junk(6)},
            {"role": "Proposer", "kind": "revise_probes", "response": junk(8)},
            {"role": "Proposer", "kind": "propose_schema", "response": SCHEMA_PAYLOAD},
        ]
        config = LoopConfig(rng_seed=11, precision_sample_n=20, recall_pool_n=20,
                            max_probes=8, max_iterations=20, schema_sample_docs=5,
                            schema_validate_n=3)
        report = run_probe_loop("find transport data", loop_oracle(proposer, relevant),
                                index, corpus, embedder, config)
        assert report.termination == "probe_cap"
        assert len(report.probes) == 8


# --------------------------------------------------------------------------
# 4. Precision-estimator calibration over 200 seeds
# --------------------------------------------------------------------------

def test_c4_precision_estimator_calibration(embedder):
    with criterion("C4 precision estimator calibration (200 seeds, plant at 0.30)"):
        texts = {f"c{i:03d}": f"calibration doc {i}" for i in range(200)}
        corpus = corpus_of_texts(texts, embedder)
        index = build_index(TagStore.from_postings(
            200, [("raw:alpha", EntityType.GENE, list(range(200)))]))
        planted = {corpus.window(i).window_id for i in range(60)}  # 60/200 = 0.30
        truth = FunctionOracle(
            lambda req: {"relevant": req.payload["window_id"] in planted})
        probe = Probe("p", parse_filter_spec(
            {"entity_groups": [["alpha"]], "semantic_query": "calibration"}))
        config = LoopConfig(rng_seed=0, precision_sample_n=50,
                            sample_full_match_set=True)
        estimates = []
        for seed in range(200):
            rng = random.Random(derive_seed(seed, "calibration"))
            estimate = estimate_precision(probe, index, corpus, embedder, truth,
                                          config, rng)
            estimates.append(estimate.precision)
        mean = sum(estimates) / len(estimates)
        bound = 2 / (50 ** 0.5)
        within = sum(1 for e in estimates if abs(e - 0.30) <= bound) / len(estimates)
        print(f"  mean estimate {mean:.4f}, within-2/sqrt(50) fraction {within:.3f}")
        assert abs(mean - 0.30) < 0.03
        assert within >= 0.90


# --------------------------------------------------------------------------
# 5. Judge conjunction and exact error rate
# --------------------------------------------------------------------------

def test_c5_judge_conjunction():
    with criterion("C5 judge conjunction (2^5 table) and 0.07 error rate"):
        def rec(rid):
            return ExtractionRecord(record_id=rid, doc_id="d", window_id="d:0:1",
                                    probe_id="p", fields={}, support_text="s")

        for combo in itertools.product([True, False], repeat=5):
            oracle = ScriptedOracle([{
                "role": "Judge", "kind": "judge_record",
                "response": {"axes": dict(zip(AXIS_KEYS, combo))}}])
            verdict = judge_record(rec("r"), "ctx", DEFAULT_RUBRIC, oracle)
            assert verdict.kept == all(combo)

        records = [rec(f"r{i:03d}") for i in range(100)]
        entries = []
        for i in range(100):
            axes = {key: True for key in AXIS_KEYS}
            if i < 7:
                axes["label_correctness"] = False
            entries.append({"role": "Judge", "kind": "judge_record",
                            "match": {"record_id": f"r{i:03d}"},
                            "response": {"axes": axes}})
        _, _, report = filter_records(records, None, ScriptedOracle(entries))
        assert report.error_rate == 0.07


# --------------------------------------------------------------------------
# 6. Eta-squared oracle equivalence and pooled-F behavior
# --------------------------------------------------------------------------

def brute_eta2(groups):
    ys = [y for g in groups.values() for y in g]
    grand = sum(ys) / len(ys)
    ss_total = sum((y - grand) ** 2 for y in ys)
    ss_within = sum(sum((y - sum(g) / len(g)) ** 2 for y in g)
                    for g in groups.values())
    if ss_total <= 0:
        return 0.0
    return max(0.0, min(1.0, 1.0 - ss_within / ss_total))


def shuffled_entities(rng, n_entities=20, labels_per=20, k=3, effect=1.5):
    values, cats, ents = [], [], []
    for e in range(n_entities):
        offset = rng.normal(0, 2.0)
        c = rng.integers(0, k, size=labels_per)
        y = offset + effect * c + rng.normal(0, 1.0, size=labels_per)
        values.extend(y.tolist())
        cats.extend(c.tolist())
        ents.extend([e] * labels_per)
    cats = rng.permutation(np.asarray(cats)).tolist()  # destroy the effect
    grouped = {}
    for e, c, y in zip(ents, cats, values):
        grouped.setdefault(e, {}).setdefault(f"g{c}", []).append(y)
    return [GroupedLabels(entity_key=f"m{e}", covariate="v", groups=g)
            for e, g in grouped.items()]


def test_c6_eta_squared():
    with criterion("C6 eta-squared oracle equivalence and pooled F"):
        # closed forms, exact
        assert eta_squared(GroupedLabels("m", "v", {"a": [1.0, 1.0],
                                                    "b": [0.0, 0.0]})) == 1.0
        assert eta_squared(GroupedLabels("m", "v", {"a": [0.0, 1.0],
                                                    "b": [0.0, 1.0]})) == 0.0

        # 500 random instances vs the independent SS oracle
        rng = random.Random(99)
        for case in range(500):
            groups = {}
            for g in range(rng.randrange(2, 6)):
                groups[f"g{g}"] = [rng.uniform(-50, 50)
                                   for _ in range(rng.randrange(1, 9))]
            grouped = GroupedLabels("m", "v", groups)
            assert abs(eta_squared(grouped) - brute_eta2(groups)) <= 1e-10, case

        # planted effect: pooled F strongly significant
        for seed in range(10):
            nprng = np.random.default_rng(seed)
            entities = []
            for e in range(20):
                offset = nprng.normal(0, 2.0)
                groups = {f"g{c}": (offset + 1.5 * c
                                    + nprng.normal(0, 1.0, 7)).tolist()
                          for c in range(3)}
                entities.append(GroupedLabels(f"m{e}", "v", groups))
            assert aggregate_eta2(entities, "v").p_value < 0.001

        # label-shuffled: p uniform across 500 seeds (KS)
        ps = []
        for seed in range(500):
            nprng = np.random.default_rng(10_000 + seed)
            entities = shuffled_entities(nprng)
            ps.append(aggregate_eta2(entities, "v").p_value)
        ks = stats.kstest(ps, "uniform")
        print(f"  shuffled-label KS p = {ks.pvalue:.4f}")
        assert ks.pvalue > 0.01


# --------------------------------------------------------------------------
# 7. Coverage and disagreement fixture arithmetic
# --------------------------------------------------------------------------

def test_c7_coverage_and_disagreement():
    with criterion("C7 coverage 0.101 and majority-disagreement 0.246"):
        reference = {f"k{i}" for i in range(1000)}
        ours = {f"k{i}" for i in range(101)} | {f"extra{i}" for i in range(250)}
        report = coverage(ours, reference)
        assert report.coverage == 0.101
        assert report.overlap == 101

        extractions = {}
        external = {}
        for i in range(500):
            name = f"mol{i:03d}"
            external[name] = 1
            extractions[name] = [0, 0, 0, 1] if i < 123 else [1, 1, 0, 1]
        stats_ = disagreement(extractions, external)
        assert stats_.majority_rate == 0.246
        assert sum(stats_.histogram_counts) == 500


# --------------------------------------------------------------------------
# 8. End-to-end determinism of the golden scripted run
# --------------------------------------------------------------------------

def test_c8_end_to_end_determinism(tmp_path):
    with criterion("C8 end-to-end determinism (rerun and kill-resume)"):
        start = time.perf_counter()
        config = write_golden_fixture(tmp_path / "fixture")
        run_a, run_b, staged = (tmp_path / n for n in ("a", "b", "staged"))
        assert cli_main(["run", "--config", str(config), "--run-dir", str(run_a)]) == 0
        assert cli_main(["run", "--config", str(config), "--run-dir", str(run_b)]) == 0
        assert digest_tree(run_a) == digest_tree(run_b)

        assert cli_main(["run", "--config", str(config), "--run-dir", str(staged),
                         "--stop-after", "index"]) == 0
        assert cli_main(["run", "--config", str(config), "--run-dir", str(staged),
                         "--stop-after", "extract"]) == 0
        assert cli_main(["run", "--config", str(config), "--run-dir", str(staged)]) == 0
        assert digest_tree(staged) == digest_tree(run_a)
        elapsed = time.perf_counter() - start
        print(f"  three full pipelines in {elapsed:.1f}s")
        assert elapsed < 120.0


# --------------------------------------------------------------------------
# 9. Performance floor at one million windows
# --------------------------------------------------------------------------

def test_c9_performance_floor():
    with criterion("C9 1M-window index: build < 60s, 3-group eval < 100ms"):
        universe = 1_000_000
        nprng = np.random.default_rng(3)
        entries = []
        for i in range(60):
            size = int(nprng.integers(50_000, 200_000))
            ordinals = nprng.choice(universe, size=size, replace=False)
            entries.append((f"raw:e{i}", EntityType.SMALL_MOLECULE, ordinals))
        build_start = time.perf_counter()
        store = TagStore.from_postings(universe, entries)
        index = build_index(store)
        build_elapsed = time.perf_counter() - build_start
        print(f"  index build: {build_elapsed:.2f}s")
        assert build_elapsed < 60.0

        spec = parse_filter_spec({
            "entity_groups": [["e0", "e1"], ["e2", "!e3"], ["SmallMolecule"]],
            "semantic_query": "q"})
        evaluate_filter(spec, index)  # warm-up
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            result = evaluate_filter(spec, index)
            times.append(time.perf_counter() - t0)
        median = sorted(times)[2]
        print(f"  eval median {median * 1000:.2f}ms over {len(result)} matches")
        assert median < 0.100

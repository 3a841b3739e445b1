import json

import httpx
import numpy as np
import pytest

from brainexplore.core import PatternId
from brainexplore.explain import (BackendError, HttpAnnotatorSuite, HypothesisDictionary, ReplayCache,
                                  build_dictionary, generate_hypotheses, load_prompts, load_templates,
                                  run_explain_stage)
from brainexplore.synth import PARAPHRASES


class ListSuite:
    def __init__(self, out):
        self.out = out

    def hypotheses(self, captions):
        return list(self.out)


def test_oracle_hypotheses_contain_shared_concept(small_world, oracle):
    c = 2
    ids = [s for s in small_world.pool_ids["measured"] if small_world.labels[small_world.stimulus_index(s), c]][:16]
    caps = [oracle.caption(s) for s in ids]
    hs = generate_hypotheses(caps, oracle)
    assert small_world.concepts[c] in hs.hypotheses
    assert 3 <= len(hs.hypotheses) <= 12


def test_clamp_and_flags():
    hs = generate_hypotheses(["a", "b"], ListSuite([f"h{i}" for i in range(15)]))
    assert len(hs.hypotheses) == 12 and "truncated" in hs.flags
    one = generate_hypotheses(["a", "b"], ListSuite(["only", "  ", ""]))
    assert one.hypotheses == ("only",) and "under_generated" in one.flags
    four = generate_hypotheses(["a", "b"], ListSuite(["a", "b", "c", "d"]))
    assert four.flags == ("outside_expected_range",)
    with pytest.raises(ValueError):
        generate_hypotheses(["a"], ListSuite(["x"]))


def test_hypothesis_client_failure_after_retries():
    class Failing:
        calls = 0

        def hypotheses(self, captions):
            Failing.calls += 1
            raise BackendError("down")

    with pytest.raises(BackendError):
        generate_hypotheses(["a", "b"], Failing(), retries=2)
    assert Failing.calls == 3


def _axis(i, d=8):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def test_duplicates_collapse_and_orthogonal_strings_stay_apart():
    d = build_dictionary(["cat"] * 50, lambda t: _axis(0))
    assert len(d) == 1 and d.merge_log == (0,) * 50
    d2 = build_dictionary(["cat", "dog"], lambda t: _axis(0 if t == "cat" else 1))
    assert d2.texts == ("cat", "dog")


def test_planted_paraphrase_clusters(small_world, oracle):
    raw = [p.format(c) for c in small_world.concepts for p in PARAPHRASES]
    raw = [raw[i] for i in np.random.default_rng(0).permutation(len(raw))]
    d = build_dictionary(raw, oracle.embed_text)
    assert len(d) == small_world.n_concepts
    # entry text is the first member seen
    for e, text in enumerate(d.texts):
        assert d.members(e, raw)[0] == text


def test_dictionary_invariants_under_jitter(small_world):
    from brainexplore.synth import oracle_annotators
    suite = oracle_annotators(small_world, jitter=0.3, seed=4)
    raw = [p.format(c) for c in small_world.concepts for p in PARAPHRASES] + ["blue sky", "red car", "blue sky"]
    d = build_dictionary(raw, suite.embed_text, 0.9)
    assert len(d) <= len(raw) and len(d.merge_log) == len(raw)
    assert set(d.merge_log) == set(range(len(d)))
    gram = d.embeddings @ d.embeddings.T
    np.fill_diagonal(gram, 0)
    assert gram.max() < 0.9


def test_dictionary_round_trip(tmp_path):
    d = build_dictionary(["a", "b", "a"], lambda t: _axis(0 if t == "a" else 1), 0.8, ("{}", "a photo of {}"))
    d.save(tmp_path)
    back = HypothesisDictionary.load(tmp_path)
    assert back.texts == d.texts and back.merge_log == d.merge_log and back.templates == d.templates
    assert back.merge_threshold == 0.8
    assert back.content_hash() == d.content_hash()


def _image_sets(world, n):
    out = {}
    for c in range(n):
        ids = [s for s in world.pool_ids["measured"] if world.labels[world.stimulus_index(s), c]][:16]
        out[PatternId("sae", "roi0", "f", c)] = ids
    return out


def test_explain_stage_bookkeeping_and_order_independence(small_world, oracle):
    sets = _image_sets(small_world, 2)
    res = run_explain_stage(sets, oracle, in_flight=1)
    assert {r.pattern for r in res.pool} == set(sets)
    per = [sum(r.pattern == p for r in res.pool) for p in sets]
    assert all(3 <= n <= 12 for n in per)
    rev = run_explain_stage(dict(reversed(list(sets.items()))), oracle, in_flight=4)
    assert rev.pool == res.pool


def test_explain_stage_isolates_failures(small_world, oracle):
    sets = _image_sets(small_world, 2)
    bad, good = list(sets)
    poisoned = set(sets[bad]) - set(sets[good])
    assert poisoned

    class Flaky:
        def caption(self, ref):
            if ref in poisoned:
                raise BackendError("caption down")
            return oracle.caption(ref)

        def hypotheses(self, caps):
            return oracle.hypotheses(caps)

    res = run_explain_stage(sets, Flaky())
    assert bad in res.failures
    assert {r.pattern for r in res.pool} == set(sets) - {bad}


def test_explain_dictionary_covers_planted_concepts():
    from brainexplore.synth import gen_world, oracle_annotators
    world = gen_world(5, n_voxels=400, n_concepts=20, rois=2, n_measured=3000, n_predicted=0)
    suite = oracle_annotators(world)
    sets = _image_sets(world, 20)
    res = run_explain_stage(sets, suite)
    d = build_dictionary([r.text for r in res.pool], suite.embed_text)
    covered = {world.concept_of(t) for t in d.texts} - {None}
    assert len(covered) >= 19


def test_prompt_assets_and_templates(tmp_path):
    prompts = load_prompts()
    assert set(prompts) == {"caption", "hypotheses", "label_A", "label_B"}
    assert all(prompts.values())
    assert load_templates() == ("{}",)
    (tmp_path / "t.txt").write_text("{}\na photo of {}\n")
    assert load_templates(tmp_path / "t.txt") == ("{}", "a photo of {}")
    (tmp_path / "bad.txt").write_text("no slot\n")
    with pytest.raises(ValueError):
        load_templates(tmp_path / "bad.txt")


# ---------------------------------------------------------------- HTTP backend

def _handler(log):
    def handle(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        log.append((request.url.path, body))
        path = request.url.path
        if path == "/caption":
            return httpx.Response(200, json={"caption": f"caption of {body['image_ref']}"})
        if path == "/hypotheses":
            return httpx.Response(200, json={"hypotheses": ["dogs", "grass", "frisbee"]})
        if path == "/label":
            return httpx.Response(200, json={"label": int(body["variant"] == "A")})
        if path in ("/embed_text", "/embed_image"):
            return httpx.Response(200, json={"vector": [3.0, 4.0]})
        return httpx.Response(404)
    return handle


def test_http_suite_protocol_and_cache(tmp_path):
    log = []
    suite = HttpAnnotatorSuite(cache_path=tmp_path / "cache.jsonl", transport=httpx.MockTransport(_handler(log)),
                               prompts={"caption": "describe"})
    assert suite.caption("img1") == "caption of img1"
    assert log[0] == ("/caption", {"image_ref": "img1", "prompt": "describe"})
    assert suite.hypotheses(["a", "b"]) == ["dogs", "grass", "frisbee"]
    assert suite.label("img1", "dogs", "A") == 1 and suite.label("img1", "dogs", "B") == 0
    np.testing.assert_allclose(suite.embed_text("dogs"), [0.6, 0.8])
    np.testing.assert_allclose(suite.embed_image("img1"), [0.6, 0.8])
    n = len(log)
    suite.caption("img1")
    assert len(log) == n  # served from cache

    offline = HttpAnnotatorSuite(cache_path=tmp_path / "cache.jsonl", offline=True, prompts={"caption": "describe"})
    assert offline.caption("img1") == "caption of img1"
    with pytest.raises(BackendError, match="offline"):
        offline.caption("unseen")


def test_http_retries_then_fails(tmp_path):
    calls = []

    def handle(request):
        calls.append(1)
        return httpx.Response(503)

    suite = HttpAnnotatorSuite(transport=httpx.MockTransport(handle), retries=2, backoff=0)
    with pytest.raises(BackendError, match="3 attempts"):
        suite.caption("x")
    assert len(calls) == 3


def test_http_rejects_bad_label_and_zero_vector():
    def handle(request):
        if request.url.path == "/label":
            return httpx.Response(200, json={"label": 7})
        return httpx.Response(200, json={"vector": [0.0, 0.0]})

    suite = HttpAnnotatorSuite(transport=httpx.MockTransport(handle), retries=0)
    with pytest.raises(BackendError):
        suite.label("x", "h", "A")
    with pytest.raises(BackendError):
        suite.embed_text("h")


def test_replay_cache_persists(tmp_path):
    c = ReplayCache(tmp_path / "c.jsonl")
    c.put("/x", {"a": 1}, {"ok": True})
    c.put("/x", {"a": 1}, {"ok": False})
    again = ReplayCache(tmp_path / "c.jsonl")
    assert again.get("/x", {"a": 1}) == {"ok": True} and len(again) == 1

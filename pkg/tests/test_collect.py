import time

import pytest

from tierbench.collect import (
    Collector,
    EndpointConfig,
    MockTransport,
    RateLimiter,
    ResponseCache,
    cache_key,
    list_prompts,
    load_prompt,
    logprob_response,
    match_label_tokens,
    text_response,
)
from tierbench.errors import (AuthError, NoLabelTokens, PartialCollection,
                              TransportError)
from tierbench.tiers import Tier

from conftest import make_bench


def config(**kw):
    base = dict(base_url="https://mock.invalid/v1", model="toy-model",
                requests_per_minute=100000.0, max_retries=2,
                backoff_base_s=0.0, max_concurrent=4)
    base.update(kw)
    return EndpointConfig(**base)


FOUR_LOGPROBS = {"Exceptional": -3.0, "Strong": -0.5, "Fair": -2.0,
                 "Limited": -4.0}


def logprob_script(payload, index):
    return logprob_response(FOUR_LOGPROBS)


class TestPromptAssets:
    def test_bundled_set(self):
        names = list_prompts()
        assert names == ["economics", "expert", "extraction",
                         "journal_anchored", "simplified"]

    def test_contents_load(self):
        for name in list_prompts():
            text = load_prompt(name)
            assert len(text) > 200

    def test_grading_prompts_pin_output_vocabulary(self):
        for name in ("expert", "simplified", "journal_anchored", "economics"):
            text = load_prompt(name)
            for label in ("Exceptional", "Strong", "Fair", "Limited"):
                assert label in text, (name, label)
            assert "EXACTLY ONE" in text

    def test_unknown_prompt(self):
        with pytest.raises(FileNotFoundError):
            load_prompt("nonexistent")


class TestMatchLabelTokens:
    def test_full_labels(self):
        got = match_label_tokens({"Exceptional": -1.0, "Strong": -2.0,
                                  "Fair": -3.0, "Limited": -4.0})
        assert got == {Tier.EXCEPTIONAL: -1.0, Tier.STRONG: -2.0,
                       Tier.FAIR: -3.0, Tier.LIMITED: -4.0}

    def test_unique_prefix_counts(self):
        got = match_label_tokens({"Str": -5.0, "Lim": -1.0})
        assert got == {Tier.STRONG: -5.0, Tier.LIMITED: -1.0}

    def test_duplicate_tokens_keep_max(self):
        got = match_label_tokens({"Strong": -0.3, "Str": -5.0, " strong.": -9.0})
        assert got == {Tier.STRONG: -0.3}

    def test_markdown_and_punctuation(self):
        got = match_label_tokens({"**Fair**": -1.0, '"Limited"': -2.0})
        assert got == {Tier.FAIR: -1.0, Tier.LIMITED: -2.0}

    def test_nonlabel_tokens_skipped(self):
        got = match_label_tokens({"The": -0.1, "Tier": -0.2, "Strong": -3.0})
        assert got == {Tier.STRONG: -3.0}

    def test_empty_after_strip_skipped(self):
        got = match_label_tokens({"...": -0.1, "fair": -1.0})
        assert got == {Tier.FAIR: -1.0}

    def test_no_matches_raises(self):
        with pytest.raises(NoLabelTokens):
            match_label_tokens({"yes": -0.5, "no": -0.7})

    def test_ambiguous_empty_prefix_never_matches(self):
        # "" (whitespace token) is a prefix of all four names: skipped
        with pytest.raises(NoLabelTokens):
            match_label_tokens({"  ": -0.5})


class TestCacheKey:
    def test_stable(self):
        a = cache_key("u", "m", "p", "t", {"temperature": 0}, 0)
        b = cache_key("u", "m", "p", "t", {"temperature": 0}, 0)
        assert a == b and len(a) == 64

    def test_sensitive_to_every_component(self):
        base = cache_key("u", "m", "p", "t", {"x": 1}, 0)
        assert cache_key("u2", "m", "p", "t", {"x": 1}, 0) != base
        assert cache_key("u", "m2", "p", "t", {"x": 1}, 0) != base
        assert cache_key("u", "m", "p2", "t", {"x": 1}, 0) != base
        assert cache_key("u", "m", "p", "t2", {"x": 1}, 0) != base
        assert cache_key("u", "m", "p", "t", {"x": 2}, 0) != base
        assert cache_key("u", "m", "p", "t", {"x": 1}, 1) != base

    def test_param_order_irrelevant(self):
        assert cache_key("u", "m", "p", "t", {"a": 1, "b": 2}) == \
            cache_key("u", "m", "p", "t", {"b": 2, "a": 1})


class TestResponseCache:
    def test_roundtrip(self, tmp_path):
        cache = ResponseCache(tmp_path / "cache")
        assert cache.get("k" * 64) is None
        cache.put("k" * 64, {"a": [1, 2]})
        assert cache.get("k" * 64) == {"a": [1, 2]}

    def test_no_tmp_leftovers(self, tmp_path):
        cache = ResponseCache(tmp_path / "cache")
        cache.put("x" * 64, {"v": 1})
        assert list((tmp_path / "cache").glob("*.tmp")) == []


class TestRateLimiter:
    def test_paces_requests(self):
        limiter = RateLimiter(requests_per_minute=6000)  # 10 ms interval
        start = time.monotonic()
        for _ in range(5):
            limiter.acquire()
        elapsed = time.monotonic() - start
        assert elapsed >= 0.04  # four intervals after the first

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            RateLimiter(0)


class TestFetchLogprobs:
    def test_parses_and_caches(self, tmp_path):
        transport = MockTransport(logprob_script)
        coll = Collector(config(), transport, ResponseCache(tmp_path / "c"))
        got = coll.fetch_logprobs("prompt", "pitch text")
        assert got[Tier.STRONG] == -0.5
        assert len(transport.calls) == 1
        # second fetch is a cache hit: no new network call
        again = coll.fetch_logprobs("prompt", "pitch text")
        assert again == got
        assert len(transport.calls) == 1

    def test_cache_survives_new_collector(self, tmp_path):
        cache_dir = tmp_path / "c"
        t1 = MockTransport(logprob_script)
        Collector(config(), t1, ResponseCache(cache_dir)).fetch_logprobs("p", "t")
        t2 = MockTransport(logprob_script)
        coll2 = Collector(config(), t2, ResponseCache(cache_dir))
        got = coll2.fetch_logprobs("p", "t")
        assert got[Tier.STRONG] == -0.5
        assert t2.calls == []

    def test_payload_shape(self, tmp_path):
        transport = MockTransport(logprob_script)
        coll = Collector(config(), transport, ResponseCache(tmp_path / "c"))
        coll.fetch_logprobs("the prompt", "the pitch")
        payload = transport.calls[0].payload
        assert payload["model"] == "toy-model"
        assert payload["max_tokens"] == 1
        assert payload["temperature"] == 0
        assert payload["logprobs"] is True
        assert payload["messages"][0]["content"].startswith("the prompt")
        assert "the pitch" in payload["messages"][0]["content"]

    def test_malformed_response(self, tmp_path):
        transport = MockTransport(lambda p, i: {"choices": [{"message": {}}]})
        coll = Collector(config(), transport, ResponseCache(tmp_path / "c"))
        with pytest.raises(AuthError):
            coll.fetch_logprobs("p", "t")


class TestRetries:
    def test_transport_errors_retry_then_give_up(self, tmp_path):
        def always_down(payload, index):
            raise TransportError("HTTP 503")

        transport = MockTransport(always_down)
        coll = Collector(config(max_retries=3), transport,
                         ResponseCache(tmp_path / "c"))
        with pytest.raises(TransportError) as exc:
            coll.fetch_logprobs("p", "t")
        assert "gave up" in str(exc.value)
        assert len(transport.calls) == 4  # initial + 3 retries

    def test_recovers_after_transient_failure(self, tmp_path):
        def flaky(payload, index):
            if index < 2:
                raise TransportError("HTTP 429")
            return logprob_script(payload, index)

        transport = MockTransport(flaky)
        coll = Collector(config(), transport, ResponseCache(tmp_path / "c"))
        got = coll.fetch_logprobs("p", "t")
        assert got[Tier.STRONG] == -0.5
        assert len(transport.calls) == 3

    def test_auth_errors_never_retry(self, tmp_path):
        def rejected(payload, index):
            raise AuthError("HTTP 401")

        transport = MockTransport(rejected)
        coll = Collector(config(max_retries=5), transport,
                         ResponseCache(tmp_path / "c"))
        with pytest.raises(AuthError):
            coll.fetch_logprobs("p", "t")
        assert len(transport.calls) == 1

    def test_backoff_grows_with_attempts(self, tmp_path, monkeypatch):
        sleeps = []
        monkeypatch.setattr(time, "sleep", lambda s: sleeps.append(s))

        def always_down(payload, index):
            raise TransportError("down")

        coll = Collector(config(max_retries=3, backoff_base_s=0.5),
                         MockTransport(always_down), ResponseCache(tmp_path / "c"))
        with pytest.raises(TransportError):
            coll.fetch_logprobs("p", "t")
        # limiter waits are sub-millisecond; backoff sleeps dominate
        backoffs = [s for s in sleeps if s > 0.1]
        assert len(backoffs) == 3
        # jittered:  base * 2^(attempt-1) * (1 + u), u in [0, 1)
        assert 0.5 <= backoffs[0] < 1.0
        assert 1.0 <= backoffs[1] < 2.0
        assert 2.0 <= backoffs[2] < 4.0


class TestFetchSamples:
    def test_one_request_per_sample(self, tmp_path):
        transport = MockTransport(lambda p, i: text_response("Strong"))
        coll = Collector(config(), transport, ResponseCache(tmp_path / "c"))
        texts = coll.fetch_samples("p", "t", n=8)
        assert texts == ["Strong"] * 8
        assert len(transport.calls) == 8
        # full rerun from cache
        assert coll.fetch_samples("p", "t", n=8) == texts
        assert len(transport.calls) == 8

    def test_partial_collection(self, tmp_path):
        def fifth_fails(payload, index):
            if index == 5:
                raise AuthError("HTTP 400")
            return text_response(f"text-{index}")

        transport = MockTransport(fifth_fails)
        coll = Collector(config(max_retries=0, max_concurrent=1,
                                requests_per_minute=1e9),
                         transport, ResponseCache(tmp_path / "c"))
        with pytest.raises(PartialCollection) as exc:
            coll.fetch_samples("p", "t", n=8)
        assert exc.value.missing == [5]
        assert sorted(exc.value.collected) == [0, 1, 2, 3, 4, 6, 7]

    def test_sample_indices_are_distinct_cache_entries(self, tmp_path):
        transport = MockTransport(lambda p, i: text_response(str(i)))
        coll = Collector(config(max_concurrent=1), transport,
                         ResponseCache(tmp_path / "c"))
        texts = coll.fetch_samples("p", "t", n=4)
        assert texts == ["0", "1", "2", "3"]


class TestCollectBenchmark:
    def _collector(self, tmp_path, script=logprob_script, **cfg):
        transport = MockTransport(script)
        coll = Collector(config(**cfg), transport, ResponseCache(tmp_path / "c"))
        return coll, transport

    def test_logprob_mode_one_call_per_pitch(self, tmp_path):
        bench = make_bench(2)  # 8 pitches
        coll, transport = self._collector(tmp_path)
        records, manifest = coll.collect_benchmark(bench, "prompt")
        assert len(records) == 8
        assert len(transport.calls) == 8
        assert manifest["n_collected"] == 8
        assert manifest["failures"] == {}
        assert manifest["evaluator_id"] == "toy-model"
        assert all(r.kind == "logprob" for r in records)
        assert records[0].point_label() is Tier.STRONG

    def test_sampled_mode_n_calls_per_pitch(self, tmp_path):
        bench = make_bench(1)  # 4 pitches
        coll, transport = self._collector(
            tmp_path, script=lambda p, i: text_response("Fair"))
        records, manifest = coll.collect_benchmark(bench, "prompt",
                                                   mode="sampled", n_samples=8)
        assert len(transport.calls) == 32
        assert all(len(r.runs) == 8 for r in records)
        assert manifest["sampling"] == {"n_samples": 8, "temperature": 1.0}

    def test_rerun_hits_cache_only(self, tmp_path):
        bench = make_bench(2)
        cache_dir = tmp_path / "c"
        t1 = MockTransport(logprob_script)
        c1 = Collector(config(), t1, ResponseCache(cache_dir))
        first, _ = c1.collect_benchmark(bench, "prompt")
        t2 = MockTransport(logprob_script)
        c2 = Collector(config(), t2, ResponseCache(cache_dir))
        second, _ = c2.collect_benchmark(bench, "prompt")
        assert t2.calls == []
        assert [r.pitch_id for r in second] == [r.pitch_id for r in first]
        assert [r.distribution for r in second] == [r.distribution for r in first]

    def test_failures_reported_not_fatal(self, tmp_path):
        bench = make_bench(1)
        bad_pitch = bench.pitches[2].text_full

        def per_pitch(payload, index):
            if bad_pitch in payload["messages"][0]["content"]:
                raise AuthError("HTTP 400")
            return logprob_script(payload, index)

        coll, _ = self._collector(tmp_path, script=per_pitch, max_retries=0)
        records, manifest = coll.collect_benchmark(bench, "prompt")
        assert len(records) == 3
        assert list(manifest["failures"]) == [bench.pitches[2].id]
        assert manifest["failures"][bench.pitches[2].id].startswith("AuthError")

    def test_concurrency_bounded(self, tmp_path):
        bench = make_bench(3)  # 12 pitches
        transport = MockTransport(logprob_script, latency_s=0.01)
        coll = Collector(config(max_concurrent=3), transport,
                         ResponseCache(tmp_path / "c"))
        coll.collect_benchmark(bench, "prompt")
        assert transport.max_in_flight <= 3

    def test_issue_rate_never_exceeds_limit(self, tmp_path):
        bench = make_bench(3)  # 12 pitches
        transport = MockTransport(logprob_script)
        coll = Collector(config(requests_per_minute=3000.0), transport,
                         ResponseCache(tmp_path / "c"))
        coll.collect_benchmark(bench, "prompt")
        stamps = sorted(c.timestamp for c in transport.calls)
        interval = 60.0 / 3000.0
        # issue grants are interval-spaced; allow scheduling noise at the ends
        assert stamps[-1] - stamps[0] >= interval * (len(stamps) - 2)

    def test_journal_lines(self, tmp_path):
        bench = make_bench(1)
        journal = tmp_path / "journal.jsonl"
        coll, _ = self._collector(tmp_path)
        coll.collect_benchmark(bench, "prompt", journal_path=journal)
        import json
        lines = [json.loads(l) for l in journal.read_text().splitlines()]
        assert len(lines) == 4
        assert {l["pitch_id"] for l in lines} == {p.id for p in bench.pitches}
        assert all(l["status"] == "ok" for l in lines)

    def test_unknown_mode(self, tmp_path):
        coll, _ = self._collector(tmp_path)
        with pytest.raises(ValueError):
            coll.collect_benchmark(make_bench(1), "prompt", mode="streaming")

"""Acceptance gate: one test (and one printed pass/fail line) per criterion.

Each criterion is verified at its stated tolerance.  The parameter-accounting
criterion includes a soft cross-check against a published 227.8M total; our
closed-form count of the same configuration plus a 22.7M encoder comes to
~228.6M (0.35% high, within the 2% soft tolerance) — the deviation is
documented here rather than force-fitted.
"""

import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from test_fsm import SMALL_SCHEMAS, brute_force_schema_language

from toollab.fsm import Pattern, build_char_dfa, build_token_dfa, compile_schema
from toollab.harness import (
    Category,
    FAMILIES,
    bundled_suite,
    categorize,
    cell_examples,
    default_grid,
    fixture_db,
    load_bundled_schema,
    run_grid,
)
from toollab.harness.grid import GRID_MAX_NEW_TOKENS, _default_ngram_backend
from toollab.hypernet import (
    Hypernet,
    HypernetConfig,
    apply_lora,
    count_params,
    generate_lora,
    literal_param_count,
)
from toollab.lm import byte_vocabulary, fit_ngram, greedy_decode
from toollab.prompts import DEFAULT_EXAMPLES, PromptSpec, build, is_well_formed
from toollab.schema import ParamKind, ParamSpec, ToolSchema
from toollab.search import beam_decode, constant_value, propose
from toollab.value import (
    ReplayBuffer,
    Transition,
    ValueNet,
    predict,
    td_loss,
    train_value,
)

FIXTURES = Path(__file__).parent / "fixtures"
VOCAB = byte_vocabulary()


@contextmanager
def criterion(name: str):
    """Emit exactly one pass/fail line for an acceptance criterion."""
    try:
        yield
    except BaseException:
        print(f"[PRIMARY] {name}: FAIL", flush=True)
        raise
    print(f"[PRIMARY] {name}: PASS", flush=True)


# -- 1. constrained-decoding soundness --------------------------------------

FAMILY_PATTERNS = {
    "nav": (
        r"(click\[(login-btn|search-btn|cart-icon|menu-toggle)\]"
        r"|scroll\[(up|down)\]"
        r"|type\[(email|password)\]\[(alice|bob|secret)\])"
    ),
    "sql": (
        r"SELECT (name|salary) FROM employees"
        r"( WHERE salary (>|<) (50000|100000))?"
    ),
    "bash": r"(ls -la|pwd|cat (notes|todo)\.txt|grep 'error' (app|server)\.log)",
}


def test_primary_1_constrained_decoding_soundness():
    with criterion("constrained-decoding soundness (>=1000 generations, 0 format errors, <2min)"):
        t0 = time.perf_counter()
        backend = _default_ngram_backend()

        api_dfas = []
        for task in bundled_suite("api"):
            if task.schema_ref is not None:
                schema = load_bundled_schema(task.schema_ref)
                api_dfas.append(build_token_dfa(compile_schema(schema), VOCAB))
        family_dfas = {
            fam: build_token_dfa(Pattern(pat), VOCAB) for fam, pat in FAMILY_PATTERNS.items()
        }

        n_generations = 0
        n_format_errors = 0
        for i, dfa in enumerate(api_dfas):
            for j in range(7):
                out = greedy_decode(backend, f"api task {i}.{j}: ", max_new=GRID_MAX_NEW_TOKENS, dfa=dfa)
                n_generations += 1
                n_format_errors += not is_well_formed("api", out)
        for fam, dfa in family_dfas.items():
            for i in range(250):
                out = greedy_decode(backend, f"{fam} task {i}: ", max_new=GRID_MAX_NEW_TOKENS, dfa=dfa)
                n_generations += 1
                n_format_errors += not is_well_formed(fam, out)

        elapsed = time.perf_counter() - t0
        assert n_generations >= 1000, n_generations
        assert n_format_errors == 0, n_format_errors
        assert elapsed < 120.0, elapsed


# -- 2. language equivalence on 20 small schemas -----------------------------

EXTRA_SCHEMAS = [
    ToolSchema("ack", (ParamSpec("ok", ParamKind.BOOLEAN, required=False),)),
    ToolSchema("pick", (ParamSpec("c", ParamKind.ENUM, enum_values=("x", "y", "z")),)),
    ToolSchema("dial", (ParamSpec("lvl", ParamKind.INTEGER, range=(-1, 1)),)),
    ToolSchema("note", (ParamSpec("txt", ParamKind.STRING, required=False),)),
    ToolSchema(
        "move",
        (
            ParamSpec("dir", ParamKind.ENUM, enum_values=("n", "s")),
            ParamSpec("fast", ParamKind.BOOLEAN),
        ),
    ),
    ToolSchema(
        "fill",
        (
            ParamSpec("field", ParamKind.STRING),
            ParamSpec("force", ParamKind.BOOLEAN, required=False),
        ),
    ),
    ToolSchema(
        "jump",
        (
            ParamSpec("h", ParamKind.INTEGER, range=(0, 2)),
            ParamSpec("w", ParamKind.INTEGER, required=False, range=(1, 2)),
        ),
    ),
    ToolSchema(
        "cast",
        (
            ParamSpec("spell", ParamKind.ENUM, enum_values=("fire", "ice")),
            ParamSpec("target", ParamKind.ENUM, required=False, enum_values=("a", "b")),
        ),
    ),
    ToolSchema(
        "trio",
        (
            ParamSpec("a", ParamKind.BOOLEAN),
            ParamSpec("b", ParamKind.BOOLEAN, required=False),
            ParamSpec("c", ParamKind.ENUM, required=False, enum_values=("u", "v")),
        ),
    ),
    ToolSchema("ns.dotted", (ParamSpec("q", ParamKind.ENUM, enum_values=("one",)),)),
    ToolSchema("idle", ()),
    ToolSchema("bump", (ParamSpec("n", ParamKind.INTEGER, range=(5, 7)),)),
    ToolSchema(
        "wrap",
        (
            ParamSpec("pad", ParamKind.INTEGER, required=False, range=(0, 1)),
            ParamSpec("tag", ParamKind.STRING),
        ),
    ),
]


def test_primary_2_language_equivalence_20_schemas():
    with criterion("language equivalence on 20 small schemas (exact set equality)"):
        schemas = list(SMALL_SCHEMAS) + EXTRA_SCHEMAS
        assert len(schemas) == 20
        for schema in schemas:
            pattern = compile_schema(schema, string_charset="ab", string_max_len=2)
            dfa = build_char_dfa(pattern)
            enumerated = set(dfa.enumerate_language(max_len=80))
            expected = brute_force_schema_language(schema)
            assert enumerated == expected, schema.tool_name


# -- 3. hypernetwork shape/gradient suite ------------------------------------

D4 = HypernetConfig(
    d_model=4, r=2, factor=3, z_dim=5, doc_dim=6, n_layers=2, modules=("q", "v"), mlp_hidden=7
)


def _finite_difference_check(named_params, loss_fn, rel_tol=1e-3):
    loss = loss_fn()
    for p in dict(named_params).values():
        if p.grad is not None:
            p.grad = None
    loss.backward()
    eps = 1e-5
    checked = 0
    for name, param in named_params:
        assert param.grad is not None, name
        flat = param.data.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 3)):
            orig = float(flat[idx])
            flat[idx] = orig + eps
            up = float(loss_fn().detach())
            flat[idx] = orig - eps
            down = float(loss_fn().detach())
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(param.grad.view(-1)[idx])
            assert math.isclose(numeric, analytic, rel_tol=rel_tol, abs_tol=1e-7), (
                name, idx, numeric, analytic,
            )
            checked += 1
    return checked


def test_primary_3_hypernet_shape_and_gradient_suite():
    with criterion("hypernet/value shapes, finite-difference gradients (rtol 1e-3), zero behavior"):
        default = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            rng = np.random.default_rng(0)
            ctx_doc = rng.normal(size=D4.doc_dim).astype(np.float64)
            ctx_support = [rng.normal(size=D4.doc_dim) for _ in range(3)]
            from toollab.hypernet import ContextVectors

            context = ContextVectors(v_doc=ctx_doc, v_support=ctx_support)

            # shapes: every pair is (r, d) / (d, r)
            net = Hypernet(D4, seed=1)
            for layer in range(D4.n_layers):
                for module in D4.modules:
                    pair = generate_lora(net, context, layer, module)
                    assert pair.A.shape == (D4.r, D4.d_model)
                    assert pair.B.shape == (D4.d_model, D4.r)

            # zero projection weights -> A = B = 0; apply_lora identity when B = 0
            zeroed = Hypernet(D4, seed=1)
            with torch.no_grad():
                for head in (zeroed.proj_A_left, zeroed.proj_A_right,
                             zeroed.proj_B_left, zeroed.proj_B_right):
                    head.weight.zero_()
                    head.bias.zero_()
            z_pair = generate_lora(zeroed, context, 0, "q")
            assert np.all(z_pair.A == 0.0) and np.all(z_pair.B == 0.0)
            some = generate_lora(net, context, 0, "q")
            b0 = type(some)(A=some.A, B=np.zeros_like(some.B), layer=0, module="q")
            w = np.arange(16, dtype=np.float64).reshape(4, 4)
            assert np.array_equal(apply_lora(w, b0, alpha=D4.alpha, r=D4.r), w)

            # hypernet gradients vs central differences
            v_doc = torch.tensor(ctx_doc)
            v_support = torch.tensor(np.stack(ctx_support))

            def hyper_loss():
                pairs = net(v_doc, v_support)
                return sum((a * a).sum() + (b * b).sum() for a, b in pairs.values())

            assert _finite_difference_check(list(net.named_parameters()), hyper_loss) >= 20

            # value-net gradients vs central differences (d=4 features)
            vnet = ValueNet(in_dim=4, hidden=6, gamma=0.9, seed=2)
            batch = [
                Transition(s=np.eye(4)[0], a=0, r=0.0, s_next=np.eye(4)[1], terminal=False),
                Transition(s=np.eye(4)[1], a=0, r=1.0, s_next=np.eye(4)[2], terminal=True),
            ]
            assert _finite_difference_check(
                list(vnet.body.named_parameters()), lambda: td_loss(vnet, batch)
            ) >= 8
        finally:
            torch.set_default_dtype(default)


# -- 4. parameter accounting --------------------------------------------------

PUBLISHED_CONFIG = HypernetConfig(d_model=3072)  # r=16, factor=64, z=512, 7 layers, q/k/v
PUBLISHED_ENCODER_PARAMS = 22_700_000
PUBLISHED_TOTAL = 227_800_000


def test_primary_4_parameter_accounting():
    with criterion("count_params == literal enumeration; published-config total within 2%"):
        for cfg in (D4, HypernetConfig(d_model=64, n_layers=3, mlp_hidden=32, z_dim=16, factor=8, r=4)):
            assert count_params(cfg) == literal_param_count(Hypernet(cfg, seed=1))

        total = count_params(PUBLISHED_CONFIG, encoder_params=PUBLISHED_ENCODER_PARAMS)
        assert total == literal_param_count(Hypernet(PUBLISHED_CONFIG, seed=1)) + PUBLISHED_ENCODER_PARAMS
        deviation = abs(total - PUBLISHED_TOTAL) / PUBLISHED_TOTAL
        # soft check: ~228.6M vs 227.8M, about 0.35% high — documented, not fitted
        print(f"  published-config total: {total:,} vs {PUBLISHED_TOTAL:,} "
              f"({deviation:.2%} deviation)")
        assert deviation < 0.02, deviation


# -- 5. TD(0) oracle on the 3-state chain MDP ---------------------------------


def test_primary_5_td0_chain_mdp_oracle():
    with criterion("TD(0) within 0.05 of DP fixed point, <=10k updates, <30s"):
        gamma = 0.9

        def one_hot(i):
            v = np.zeros(3, dtype=np.float32)
            v[i] = 1.0
            return v

        dp = {0: gamma * 0.8, 1: 0.8}  # dynamic-programming solution, by hand
        net = ValueNet(in_dim=3, gamma=gamma, seed=42)
        buf = ReplayBuffer(capacity=100)
        buf.add(Transition(s=one_hot(0), a=0, r=0.0, s_next=one_hot(1), terminal=False))
        buf.add(Transition(s=one_hot(1), a=0, r=0.8, s_next=one_hot(2), terminal=True))
        t0 = time.perf_counter()
        losses = train_value(net, buf, steps=4000, batch_size=2, step_size=0.05, seed=42)
        elapsed = time.perf_counter() - t0
        assert len(losses) <= 10_000
        assert elapsed < 30.0, elapsed
        for state, v_star in dp.items():
            assert abs(predict(net, one_hot(state)) - v_star) < 0.05, (state, v_star)


# -- 6. beam-search exactness -------------------------------------------------


def test_primary_6_beam_search_exactness():
    with criterion("full-width beam == global argmax of logp + log v; constant-V invariance"):
        from toollab.fsm import enumerate_token_language, mask_logits
        from toollab.search import _log_softmax

        backend = fit_ngram("f(a), f(b), f(a), f(c), g(a)", order=2)
        dfa = build_token_dfa(Pattern("(f|g)\\((a|b|c)\\)"), VOCAB)
        language = list(enumerate_token_language(dfa))
        assert 0 < len(language) <= 64

        def exhaustive_logp(seq):
            state, context, total = dfa.start, list(VOCAB.tokenize("call: ")), 0.0
            for token in seq:
                logits = mask_logits(backend.next_logits(context), dfa.mask(state))
                total += float(_log_softmax(logits)[token])
                state = dfa.step(state, token)
                context.append(token)
            logits = mask_logits(backend.next_logits(context), dfa.mask(state))
            return total + float(_log_softmax(logits)[VOCAB.eos_id])

        values = {
            VOCAB.detokenize(seq): 0.1 + 0.8 * (i % 3) / 2
            for i, seq in enumerate(sorted(language))
        }
        oracle_score, oracle_text = max(
            (exhaustive_logp(seq) + math.log(values[VOCAB.detokenize(seq)]),
             VOCAB.detokenize(seq))
            for seq in language
        )
        best = beam_decode(backend, "call: ", values.__getitem__,
                           k=len(language), dfa=dfa, max_steps=8)
        assert best.action_text == oracle_text
        assert math.isclose(best.score, oracle_score, rel_tol=1e-6)

        # constant V never changes the argmax of a pure-likelihood beam
        top = propose(backend, "call: ", k=len(language), dfa=dfa, max_steps=8)[0]
        for v in (1.0, 0.5, 0.01):
            invariant = beam_decode(backend, "call: ", constant_value(v),
                                    k=len(language), dfa=dfa, max_steps=8)
            assert invariant.action_text == top.action_text


# -- 7. deterministic full-grid reproduction ----------------------------------


def test_primary_7_full_grid_deterministic():
    with criterion("full 6x2x2x3 grid: identical hash across two seed-42 runs, "
                   "per-family adapter delta, four tables, under time budget"):
        t0 = time.perf_counter()
        first = run_grid(seed=42)
        second = run_grid(seed=42)
        elapsed = time.perf_counter() - t0

        assert len(first.cells) == 6 * 2 * 2 * 3
        assert first.content_hash() == second.content_hash()

        main = first.table_main()
        assert set(main) == set(FAMILIES)
        for family in FAMILIES:
            delta = first.hypernet_delta(family)
            assert delta == delta  # the on/off delta is defined for every family
            assert math.isclose(main[family]["delta"], delta)
        assert len(first.table_shot_sweep()) == 6
        assert len(first.table_docs()) == 2
        assert len(first.table_noise()) == 3
        print(f"  grid wall time (two runs): {elapsed:.0f}s; "
              f"hash {first.content_hash()[:12]}…")
        assert elapsed < 2 * 3600.0, elapsed  # hard bound; ~45 min is the target
        assert elapsed < 45 * 60.0, elapsed


# -- 8. error-taxonomy fixture ------------------------------------------------


def test_primary_8_error_taxonomy_fixture():
    with criterion("30-case error-taxonomy fixture categorized with 100% agreement"):
        import json

        cases = json.loads((FIXTURES / "error_taxonomy.json").read_text())
        assert len(cases) == 30
        db = fixture_db()
        disagreements = [
            case["id"]
            for case in cases
            if categorize(case["family"], case["raw"], case["gold"], db)
            is not Category(case["expected"])
        ]
        assert disagreements == []


# -- 9. noise-injection contract ----------------------------------------------


def test_primary_9_noise_injection_contract():
    with criterion("every noise cell renders exactly n_corrupt format-failing examples"):
        for cell in default_grid():
            if cell.noise == 0:
                continue
            for family in FAMILIES:
                rendered = cell_examples(family, cell, seed=42, task_id=f"{family}-007")
                failing = sum(1 for _q, out in rendered if not is_well_formed(family, out))
                # n_corrupt, clamped to the number of rendered shots
                assert failing == min(cell.noise, cell.shots), (family, cell)


# -- 10. prompt golden files --------------------------------------------------


def test_primary_10_prompt_golden_files():
    with criterion("prompt builder byte-identical to golden files (3/5-shot, docs on/off)"):
        for family in FAMILIES:
            for shots in (3, 5):
                for docs in (True, False):
                    text = build(
                        PromptSpec(
                            family=family,
                            query="<QUERY>",
                            examples=DEFAULT_EXAMPLES[family][:shots],
                            shots=shots,
                            use_docs=docs,
                        )
                    )
                    name = f"{family}_{shots}shot_docs_{'on' if docs else 'off'}.txt"
                    golden = (FIXTURES / "prompts" / name).read_bytes()
                    assert text.encode() == golden, name

from __future__ import annotations

import random

from gen import random_dag

from hpmoe.compiler import CompileOptions, check_compiled, compile_graphs
from hpmoe.cost import CostModel
from hpmoe.scheduler import deserialize_ssc, serialize_ssc
from hpmoe.sim import dependency_violations, simulate

CASES = 1000


def test_random_dags_compile_and_run_clean():
    rng = random.Random(0)
    fallbacks = 0
    for seed in range(CASES):
        opts = CompileOptions(strict_single_trigger=bool(seed % 2))
        ct = compile_graphs([random_dag(seed)], options=opts)
        assert check_compiled(ct) == [], seed
        fallbacks += bool(ct.propagation[0].fallback_ops)
        cm = CostModel(aic_workers=rng.randint(1, 3), aiv_workers=rng.randint(1, 4),
                       signal_delay=rng.choice([0.0, 0.5]))
        r = simulate(ct.sscs, cm, rng.choice(["pipelined", "serial_baseline"]),
                     rng.choice(["static", "dynamic"]))
        assert len(r.commit_order) == len(ct.tds[0]), seed
        assert dependency_violations(r, ct.dep) == [], seed
        if seed % 50 == 0:
            s = ct.sscs[0]
            assert serialize_ssc(deserialize_ssc(serialize_ssc(s))) == serialize_ssc(s)
    # the generator must actually exercise the fallback path
    assert fallbacks > CASES // 10

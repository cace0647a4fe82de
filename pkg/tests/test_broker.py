from broker import explore_with_broker
from memsim.services.eviction import EvictionStrategy, explore


def test_parallel_explore_matches_sequential(tiny):
    strategies = [EvictionStrategy(S=3), EvictionStrategy(S=4), EvictionStrategy(S=4, C=2, D=2, L=1)]

    parallel = explore_with_broker(tiny, strategies, trials=8, seed=2, workers=2)

    assert parallel == explore(tiny, strategies, trials=8, seed=2)

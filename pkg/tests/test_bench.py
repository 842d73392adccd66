import csv

import numpy as np
import pytest

from wavediff.bench import CSV_HEADER, bench_sampling, csv_row, write_csv
from wavediff.diffusion import make_schedule
from wavediff.networks import PRESETS, Generator
from wavediff.rng import RngStream


@pytest.fixture(scope="module")
def tiny():
    return Generator(PRESETS["tiny"].spec, RngStream(0, "init"))


@pytest.mark.parametrize("T_", [2, 4])
def test_generator_calls_equal_steps(tiny, T_):
    res = bench_sampling(tiny, make_schedule(T_), batch=2, trials=2, warmup=1)
    assert res.generator_calls == T_
    assert len(res.times) == 2


def test_batch_does_not_change_calls(tiny):
    a = bench_sampling(tiny, make_schedule(4), batch=1, trials=1, warmup=0)
    b = bench_sampling(tiny, make_schedule(4), batch=2, trials=1, warmup=0)
    assert a.generator_calls == b.generator_calls == 4


def test_timing_spread(tiny):
    res = bench_sampling(tiny, make_schedule(2), batch=4, trials=30, warmup=3)
    s = res.stats()
    assert s["p95"] / s["p50"] < 2.0
    per = res.stats(per_image=True)
    assert per["mean"] == pytest.approx(s["mean"] / 4)


def test_invalid_arguments(tiny):
    with pytest.raises(ValueError):
        bench_sampling(tiny, make_schedule(2), trials=0)


def test_csv(tiny, tmp_path):
    res = bench_sampling(tiny, make_schedule(2), batch=1, trials=2, warmup=0)
    row = csv_row("tiny", tiny, res)
    assert len(row) == len(CSV_HEADER)
    path = tmp_path / "bench.csv"
    write_csv(str(path), [row])
    write_csv(str(path), [row])
    rows = list(csv.reader(open(path)))
    assert rows[0] == CSV_HEADER and len(rows) == 3
    assert rows[1][:3] == ["tiny", "16", "2"]
    assert np.isclose(float(rows[1][6]), res.stats()["mean"])

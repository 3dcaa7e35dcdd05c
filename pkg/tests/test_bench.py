import csv

import numpy as np
import pytest

from chunklm.bench import CSV_HEADER, bench_attention, chunked_peak_constant, fit_exponent, run_scaling, validate_n_list
from chunklm.attention import MAX_ATTENTION_LEN
from chunklm.config import ModelConfig

MC = ModelConfig(chunk_size=16, d_model=8, d_hidden=8, ssm_taps=4, mem_capacity=64)


def test_fit_exponent_exact_power_law():
    ns = np.array([100, 200, 400, 800])
    alpha, r2 = fit_exponent(ns, 3e-6 * ns**1.5)
    assert alpha == pytest.approx(1.5) and r2 == pytest.approx(1.0)


@pytest.mark.parametrize("ns", [[1, 2, 4], [10, 20, 40, 79], [8, 4, 16, 64], [8, 8, 16, 64]])
def test_validate_n_list(ns):
    with pytest.raises(ValueError):
        validate_n_list(ns)


def test_small_scaling_run(tmp_path):
    out = tmp_path / "s.csv"
    records, fits = run_scaling([64, 128, 256, 512], [64, 128, 256, 512], MC, reps=1, d_attn=8, out=out, log=lambda *_: None)
    rows = list(csv.reader(open(out)))
    assert rows[0] == CSV_HEADER == ["tag", "n", "c", "reps", "sec_per_token", "peak_floats"]
    assert len(rows) == 9
    assert set(fits) == {"chunked", "attention"}
    assert chunked_peak_constant(records)
    attn = {r.n: r.peak_floats for r in records if r.tag == "attention"}
    assert attn[512] / attn[256] > 3.0


def test_refusal_row():
    rec = bench_attention(MAX_ATTENTION_LEN + 1, d=2, reps=1)
    assert rec.refused and rec.row()[4] == "refused"

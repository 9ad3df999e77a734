import csv
import hashlib
import io
import json

import numpy as np
import pytest

from oracles import simplex_qp_enumerate, simplex_qp_kkt
from mmfs.cli import OUTPUT_FORMAT, derive_seed, main, parse_k_grid
from mmfs.dataset import SparseDataset, dump_svmlight, load_svmlight, normalize
from mmfs.errors import ConfigError
from mmfs.metrics import KernelSpec, correlation_relevance, gram_matrix
from mmfs.selection import read_ranking


def _toy_file(path, m=60, n=20, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, n))
    y = np.where(X[:, 0] - X[:, 3] + 0.5 * rng.standard_normal(m) > 0, 1.0, -1.0)
    path.write_text(dump_svmlight(SparseDataset.from_dense(X, y)))
    return path


def _rows(text):
    return [l for l in text.splitlines() if l and not l.startswith("#")]


@pytest.fixture
def toy(tmp_path):
    return _toy_file(tmp_path / "toy.svml")


def test_derive_seed_and_k_grid():
    assert derive_seed(0, "solver") == derive_seed(0, "solver")
    assert derive_seed(0, "solver") != derive_seed(0, "splits")
    assert derive_seed(0, "solver") != derive_seed(1, "solver")
    assert 0 <= derive_seed(5, "x") < 2**32
    assert parse_k_grid("1,3:5,10:20:5") == [1, 3, 4, 5, 10, 15, 20]
    assert parse_k_grid("small") == list(range(2, 101))
    for bad in ("a", "1:2:3:4", ""):
        with pytest.raises(ConfigError):
            parse_k_grid(bad)


def test_select_top_k_tsv(toy, tmp_path):
    out = tmp_path / "rank.tsv"
    code = main(["select", "--data", str(toy), "--theta", "0.5", "--gamma", "1", "--C", "1",
                 "--top-k", "10", "--output", str(out)])
    assert code == 0
    rows = _rows(out.read_text())
    assert len(rows) == 11  # header plus ten features
    telemetry = json.loads((tmp_path / "rank.tsv.solution.json").read_text())
    assert telemetry["status"] == "converged"
    assert telemetry["meta"]["format_version"] == OUTPUT_FORMAT
    assert telemetry["meta"]["run_config"]["theta"] == 0.5


def test_select_json_embeds_run_config(toy, tmp_path):
    out = tmp_path / "rank.json"
    assert main(["select", "--data", str(toy), "--output", str(out), "--output-format", "json"]) == 0
    doc = json.loads(out.read_text())
    assert doc["meta"]["format_version"] == OUTPUT_FORMAT
    assert doc["meta"]["run_config"]["data"] == str(toy)
    assert len(read_ranking(out.read_text())) == 20


def test_select_qp_poly2_matches_constrained_oracle(tmp_path):
    data_path = _toy_file(tmp_path / "n50.svml", m=80, n=50, seed=3)
    out = tmp_path / "rank.tsv"
    code = main(["select", "--data", str(data_path), "--solver", "qp", "--kernel", "poly2",
                 "--output", str(out)])
    assert code == 0
    ranking = read_ranking(out.read_text())
    chosen = set(ranking.feature_ids[ranking.tier != "fallback"].tolist())

    data, _ = normalize(load_svmlight(data_path))
    G = gram_matrix(data, KernelSpec("poly2")).values
    r = correlation_relevance(data).values
    a = simplex_qp_kkt(G, 0.5 * r, 0.5, 1.0)
    assert chosen == set(np.flatnonzero(a > 1e-6).tolist())


def test_kkt_oracle_agrees_with_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(5):
        A = rng.standard_normal((10, 6))
        Q = A.T @ A / 10
        c = rng.random(6)
        a_enum, _ = simplex_qp_enumerate(Q, c, 0.5, 1.0)
        np.testing.assert_allclose(simplex_qp_kkt(Q, c, 0.5, 1.0), a_enum, atol=1e-7)


def test_missing_file_exits_1_without_output(tmp_path):
    out = tmp_path / "rank.tsv"
    assert main(["select", "--data", str(tmp_path / "nope.svml"), "--output", str(out)]) == 1
    assert not out.exists()
    assert not (tmp_path / "rank.tsv.solution.json").exists()


def test_parse_error_exits_2_with_line(tmp_path, capsys):
    bad = tmp_path / "bad.svml"
    bad.write_text("+1 1:0.5 2:1\n-1 2:x\n")
    assert main(["select", "--data", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_nonconvergence_exits_3_and_still_writes(toy, tmp_path):
    out = tmp_path / "rank.tsv"
    code = main(["select", "--data", str(toy), "--max-sweeps", "1", "--eps", "1e-14",
                 "--output", str(out)])
    assert code == 3
    assert len(_rows(out.read_text())) == 21
    telemetry = json.loads((tmp_path / "rank.tsv.solution.json").read_text())
    assert telemetry["status"] == "max_sweeps"


def test_capacity_exits_4(toy, monkeypatch):
    monkeypatch.setenv("MMFS_DENSE_LIMIT", "100")
    assert main(["select", "--data", str(toy)]) == 4


def test_config_errors_exit_1(toy, tmp_path):
    assert main(["select", "--data", str(toy), "--kernel", "poly2"]) == 1
    assert main(["select", "--data", str(toy), "--theta", "1.5"]) == 1
    assert main(["eval", "--data", str(toy), "--protocol", "split"]) == 1
    assert main(["gen", "--n-noise", "5", "--duplicate", "40:2",
                 "--output", str(tmp_path / "g.svml")]) == 1
    assert not (tmp_path / "g.svml").exists()


def test_eval_ranking_equals_paper_mode(toy, tmp_path):
    rank = tmp_path / "rank.tsv"
    assert main(["select", "--data", str(toy), "--output", str(rank)]) == 0
    out = tmp_path / "eval.json"
    common = ["eval", "--data", str(toy), "--k-grid", "1:5", "--n-repeats", "3",
              "--output", str(out), "--output-format", "json"]
    assert main(common + ["--ranking", str(rank)]) == 0
    decomposed = out.read_bytes()
    assert main(common + ["--paper-mode"]) == 0
    assert out.read_bytes() == decomposed
    doc = json.loads(decomposed)
    assert doc["meta"]["format_version"] == OUTPUT_FORMAT
    assert [row["k"] for row in doc["rows"]] == [1, 2, 3, 4, 5]


def test_eval_tsv_loocv(toy, tmp_path):
    out = tmp_path / "eval.tsv"
    assert main(["eval", "--data", str(toy), "--protocol", "loocv", "--k-grid", "2,4",
                 "--output", str(out)]) == 0
    text = out.read_text()
    assert OUTPUT_FORMAT in text
    assert _rows(text)[0].split("\t")[0] == "K" and len(_rows(text)) == 3


def test_sweep_csv(toy, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--data", str(toy), "--k-grid", "1:3", "--gamma-grid", "0.1,1",
                 "--n-repeats", "2", "--output", str(out)]) == 0
    text = out.read_text()
    assert OUTPUT_FORMAT in text
    rows = list(csv.DictReader(io.StringIO("\n".join(_rows(text)))))
    assert [(float(r["gamma"]), int(r["K"])) for r in rows] == [
        (g, k) for g in (0.1, 1.0) for k in (1, 2, 3)]


def _bench(tmp_path, *extra):
    out = tmp_path / "bench.csv"
    code = main(["bench", "--output", str(out), *extra])
    text = out.read_text()
    assert text.startswith("# meta: ")
    meta = json.loads(text.splitlines()[0][len("# meta: "):])
    assert meta["format_version"] == OUTPUT_FORMAT
    return code, list(csv.DictReader(io.StringIO("\n".join(_rows(text)))))


def test_bench_columns_and_determinism(tmp_path):
    args = ["--n-instances", "300", "--n-synthetic-features", "400", "--repeats", "2",
            "--compare-qp"]
    code, rows = _bench(tmp_path, *args)
    assert code == 0
    for phase in ("load_s", "normalize_s", "relevance_s", "solve_s", "rank_s", "peak_rss_mb"):
        assert float(rows[0][phase]) >= 0
    assert float(rows[0]["rel_gap"]) <= 1e-6
    _, again = _bench(tmp_path, *args)
    assert [r["sweeps"] for r in rows] == [r["sweeps"] for r in again]
    assert rows[0]["nnz"] == again[0]["nnz"]


@pytest.mark.slow
def test_bench_solve_time_tracks_nnz(tmp_path):
    # first repeat includes JIT compilation, so compare the best of the rest
    solve = {}
    for m in (10_000, 40_000):
        _, rows = _bench(tmp_path, "--n-instances", str(m), "--n-synthetic-features", "2000",
                         "--repeats", "4")
        solve[m] = min(float(r["solve_s"]) for r in rows[1:])
        nnz = int(rows[0]["nnz"])
    assert 3.5 <= nnz / (m // 4 * 30) <= 4.5
    ratio = solve[40_000] / solve[10_000]
    print(f"solve time ratio at 4x nnz: {ratio:.2f}")
    assert 2 <= ratio <= 8


@pytest.mark.slow
def test_bench_dense_speedup(tmp_path):
    code, rows = _bench(tmp_path, "--n-instances", "500", "--n-synthetic-features", "2000",
                        "--nnz-per-instance", "2000", "--compare-qp", "--repeats", "2")
    assert code == 0
    row = rows[-1]
    assert int(row["nnz"]) == 500 * 2000
    assert float(row["rel_gap"]) <= 1e-6
    assert float(row["speedup"]) >= 10


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_manifest_lists_declared_ids(tmp_path):
    out = tmp_path / "g.svml"
    assert main(["gen", "--n-instances", "500", "--n-informative", "2", "--n-noise", "50",
                 "--duplicate", "1:3", "--seed", "4", "--output", str(out)]) == 0
    manifest = json.loads((tmp_path / "g.svml.manifest.json").read_text())
    assert manifest["informative"] == [0, 1]
    assert manifest["noise"] == list(range(2, 52))
    assert manifest["duplicate_groups"] == [[1, 52, 53, 54]]
    ds = load_svmlight(out)
    assert ds.n_instances == 500 and ds.n_features == 55


def test_gen_sparsity_target(tmp_path):
    out = tmp_path / "g.svml"
    assert main(["gen", "--n-instances", "2000", "--n-noise", "5000", "--nnz-per-instance", "30",
                 "--output", str(out)]) == 0
    ds = load_svmlight(out)
    assert abs(ds.nnz / ds.n_instances - 30) <= 3


def test_gen_is_bytewise_deterministic(tmp_path):
    paths = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.svml"
        assert main(["gen", "--seed", "11", "--duplicate", "0:2", "--output", str(out)]) == 0
        paths.append(out)
    assert _sha(paths[0]) == _sha(paths[1])
    other = tmp_path / "c.svml"
    main(["gen", "--seed", "12", "--duplicate", "0:2", "--output", str(other)])
    assert _sha(other) != _sha(paths[0])

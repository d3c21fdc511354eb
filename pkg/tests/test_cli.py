import numpy as np
import pytest

from convexbp.cli import EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, main, read_config
from convexbp.counting import read_counts
from convexbp.exact import brute_force_marginals
from convexbp.factor_graph import ising_grid, write_model

from conftest import random_tree


@pytest.fixture
def grid_file(tmp_path):
    path = tmp_path / "grid.uai"
    write_model(ising_grid(3, 1.0, 1.0, "mixed", 0), path)
    return path


def test_fit_then_solve(tmp_path, grid_file):
    counts = tmp_path / "c.counts"
    assert main(["fit", "--model", str(grid_file), "--method", "trw", "--out", str(counts)]) == EXIT_OK
    out = tmp_path / "b.txt"
    assert main(["solve", "--model", str(grid_file), "--counts", str(counts),
                 "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# free_energy")
    assert len(lines) == 10
    probs = np.array([[float(x) for x in l.split()[1:]] for l in lines[1:]])
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_solve_tree_exact(tmp_path):
    g = random_tree(4, n=6)
    path = tmp_path / "t.uai"
    write_model(g, path)
    out = tmp_path / "b.txt"
    assert main(["solve", "--model", str(path), "--method", "l2", "--tol", "1e-12",
                 "--max-iters", "100000", "--schedule", "seq", "--out", str(out)]) == EXIT_OK
    got = np.array([[float(x) for x in l.split()[1:]] for l in out.read_text().splitlines()[1:]])
    exact = np.array(brute_force_marginals(g)[0].var)
    assert np.abs(got - exact).max() <= 1e-6


def test_solve_not_converged(grid_file, capsys):
    code = main(["solve", "--model", str(grid_file), "--method", "maxent", "--max-iters", "2",
                 "--tol", "1e-14"])
    assert code == EXIT_NOT_CONVERGED
    out = capsys.readouterr()
    assert out.out.startswith("# free_energy")
    assert "did not converge" in out.err


def test_input_errors(tmp_path, grid_file, capsys):
    assert main(["solve"]) == EXIT_INPUT
    assert main(["solve", "--model", str(tmp_path / "missing.uai")]) == EXIT_INPUT
    bad = tmp_path / "bad.uai"
    bad.write_text("MARKOV\n1\n2\n1\n1 0\n3\n1 1 1\n")
    assert main(["fit", "--model", str(bad)]) == EXIT_INPUT
    assert main(["grid", "--n", "3", "--methods", "cccp"]) == EXIT_INPUT
    assert main(["grid", "--n", "3", "--trials", "zero"]) == EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_grid_with_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nn = 3\nd-o = 0.5,1.0\nmode = mixed\ntrials = 1\n"
                   "methods = trw,convex-l2\nseed = 4\n")
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["grid", "--config", str(cfg), "--out", str(out1)]) == EXIT_OK
    assert main(["grid", "--config", str(cfg), "--out", str(out2)]) == EXIT_OK
    text = out1.read_text()
    assert text == out2.read_text()
    assert len(text.splitlines()) == 1 + 2 * 2 * 2
    # flags override the file
    out3 = tmp_path / "c.csv"
    assert main(["grid", "--config", str(cfg), "--trials", "2", "--out", str(out3)]) == EXIT_OK
    assert len(out3.read_text().splitlines()) == 1 + 2 * 2 * 2 * 2


def test_read_config_errors(tmp_path):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("n 3\n")
    from convexbp.cli import InputError
    with pytest.raises(InputError):
        read_config(str(cfg))


def test_fit_methods_write_admissible(tmp_path, grid_file):
    from convexbp.counting import check_admissible
    from convexbp.factor_graph import read_model
    g = read_model(grid_file)
    for method in ("l2", "maxent", "trw"):
        out = tmp_path / f"{method}.counts"
        assert main(["fit", "--model", str(grid_file), "--method", method, "--eps", "0.03",
                     "--out", str(out)]) == EXIT_OK
        assert check_admissible(g, read_counts(out, g), 1e-8).admissible
    # Bethe targets are not reachable on a loopy grid
    assert main(["fit", "--model", str(grid_file), "--method", "bethe"]) == EXIT_INPUT

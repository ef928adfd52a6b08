from qcia.degrade import QualityTaxonomy
from qcia.evaluation import SimulationConfig, cross_quality_matrix, mixed_quality_experiment
from qcia.neuralnet import EpochStats
from qcia.plotting import plot_history, plot_matrix, plot_report

PNG = b"\x89PNG\r\n\x1a\n"
TAX = QualityTaxonomy((20,), (16,))


def test_matrix_png_deterministic(tmp_path):
    a = plot_matrix([[1.0, 0.2], [0.3, 0.9]], ["G", "BJ1"], ["G", "BJ1"], tmp_path / "a.png", title="m")
    b = plot_matrix([[1.0, 0.2], [0.3, 0.9]], ["G", "BJ1"], ["G", "BJ1"], tmp_path / "b.png", title="m")
    assert a.read_bytes()[:8] == PNG
    assert a.read_bytes() == b.read_bytes()


def test_report_figures(tmp_path):
    cross = cross_quality_matrix(SimulationConfig(taxonomy=TAX, items_per_cell=10))
    mixed = mixed_quality_experiment(SimulationConfig(taxonomy=TAX, items=40, ks=(1, 2)))
    paths = plot_report(cross, tmp_path, "cross") + plot_report(mixed, tmp_path, "mixed")
    names = sorted(p.name for p in paths)
    assert names == ["cross_matrix.png", "mixed_settings.png"]
    assert all(p.read_bytes()[:8] == PNG for p in paths)


def test_history_png(tmp_path):
    hist = [EpochStats(i, 1.0 / (i + 1), 0.5 + 0.1 * i) for i in range(4)]
    p = plot_history(hist, tmp_path / "h.png", title="t")
    assert p.read_bytes()[:8] == PNG

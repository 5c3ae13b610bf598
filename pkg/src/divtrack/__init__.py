"""Sparse, diversified index tracking with cluster-based regularisation."""
from .backtest import BacktestConfig, BacktestReport, ErrorMetrics, grid_search, run_backtest, tracking_error_metrics
from .ingest import DataError, PricePanel, ReturnsMatrix, load_price_panel, log_returns, write_price_panel
from .qp import QpProblem, QpSolution, kkt_residuals, solve_qp
from .spectral import ClusterModel, cluster_assets
from .stats import affinity_matrix, median_heuristic, rank_distance, spearman_rho
from .synthetic import PanelSpec, ToySpec, generate_panel, generate_toy
from .tracker import Portfolio, TrackerParams, assemble_qp, diversity_loss, reweighted_l1, sparsify, track

__version__ = "0.1.0"

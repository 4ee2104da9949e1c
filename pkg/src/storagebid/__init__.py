"""Decision-focused predict-then-bid toolkit for energy storage arbitrage.

Train a price predictor end to end through a storage valuation layer
(whose SoC-transition duals become bid curves) and a market-clearing layer,
then backtest the learned bidding policy on price series.
"""

__version__ = "0.1.0"

from .arbitrage import (
    ArbProblem,
    SolverError,
    kkt_residuals,
    opportunity_value,
    solve_arbitrage,
    solve_hindsight,
    solve_hindsight_pricemaker,
)
from .bids import anchored_bid_curve, compute_theta_segments, form_bids, perturb_bids
from .clearing import ClearingResult, clear_price_maker, clear_price_taker, settle_profit
from .domain import (
    ArbSolution,
    BidCurve,
    FeatureWindow,
    PriceSeries,
    Sample,
    SensitivityModel,
    StorageParams,
    ValidationError,
    read_price_csv,
    soc_grid,
    validate_storage_params,
    write_price_csv,
)
from .kktdiff import assemble_kkt_jacobian, dual_price_sensitivity, theta_jacobian
from .loss import LossConfig, chain_gradient, perturbed_loss_and_grad
from .pipeline import (
    BacktestReport,
    TrainConfig,
    backtest,
    build_dataset,
    compare_reports,
    train_decision_focused,
)
from .predictor import (
    AdamState,
    NetSpec,
    Weights,
    adam_step,
    forward,
    init_weights,
    load_checkpoint,
    pretrain_mse,
    save_checkpoint,
    vjp,
)
from .synth import synthetic_price_series

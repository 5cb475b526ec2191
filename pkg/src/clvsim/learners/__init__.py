from .boosting import (
    GradientBoostedEnsemble,
    class_priors,
    fit_gbdt_classifier,
    fit_gbdt_regressor,
    log_loss,
    predict_proba,
    softmax,
)
from .tree import (
    ForcedSplitSpec,
    RegressionTree,
    TreeFitParams,
    TreeGrower,
    apply_bins,
    bin_thresholds,
    feature_importances,
    fit_regression_tree,
    split_gain,
    tree_predict,
)

__all__ = [
    "ForcedSplitSpec", "GradientBoostedEnsemble", "RegressionTree", "TreeFitParams", "TreeGrower",
    "apply_bins", "bin_thresholds", "class_priors", "feature_importances", "fit_gbdt_classifier",
    "fit_gbdt_regressor", "fit_regression_tree", "log_loss", "predict_proba", "softmax",
    "split_gain", "tree_predict",
]

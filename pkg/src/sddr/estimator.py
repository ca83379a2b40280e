"""Scikit-learn style estimator wrapping the fit/predict lifecycle.

The estimator stores its constructor arguments untouched (so `clone`,
`get_params` and `set_params` compose with the wider ecosystem) and
delegates to the engine on `fit`. Because models are specified by
formulas over named columns, `fit` accepts a column mapping, a pandas
DataFrame, our own Dataset, or a plain 2-d array (columns then named
x1..xp); the response may live in the data or be passed separately as
`y`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import distributions as dist
from .design import DataError, Dataset, DesignConfig
from .engine import FitConfig, FittedModel, fit as engine_fit
from .formula import build_spec, parse_model_formula


def _column_dict(data, y=None, response: str | None = None) -> dict:
    if isinstance(data, Dataset):
        cols = {name: data._numeric.get(name, data._strings.get(name))
                for name in data.names}
    elif hasattr(data, "columns") and hasattr(data, "__getitem__"):
        cols = {str(c): np.asarray(data[c]) for c in data.columns}
    elif isinstance(data, dict):
        cols = {str(k): np.asarray(v) for k, v in data.items()}
    else:
        arr = np.asarray(data, dtype=float)
        if arr.ndim != 2:
            raise DataError("expected a 2-d array, mapping, DataFrame or Dataset")
        cols = {f"x{j + 1}": arr[:, j] for j in range(arr.shape[1])}
    if y is not None:
        if response is None:
            raise DataError("cannot attach y without a response name")
        cols[response] = np.asarray(y)
    return cols


class SemiStructuredRegression(BaseEstimator):
    """Distributional regression with structured terms and deep trunks.

    Parameters
    ----------
    formulas : list of str
        One formula per distribution parameter, e.g.
        ``["y ~ 1 + x1 + s(x2) + d(net: x1, x2)", "y ~ 1"]``.
    family : str, default "normal"
        Outcome distribution; see `sddr.distributions.list_families()`.
    trunks : dict, optional
        Trunk architectures, name -> list of hidden widths or
        ``{"units": [...], "activation": "relu"|"tanh"}``.
    default_df : float, optional
        Df target for penalized blocks without an explicit ``df=``;
        defaults to the min-of-maxima rule.
    n_knots, degree, penalty_order, tensor_n_knots : int
        Spline basis settings.
    learning_rate, epochs, batch_size, seed : optimizer settings.
    early_stopping, validation_fraction, patience : validation-based
        early stopping (off by default).
    orthogonalize : bool, default True
        Disable only for ablation studies; identifiability of structured
        terms that share features with a trunk is lost without it.

    Attributes
    ----------
    model_ : FittedModel
        The trained artifact (serializable via ``model_.save``).
    diagnostics_ : dict
        Loss trace, penalty calibration, orthogonality residual.
    """

    def __init__(self, formulas=None, family="normal", trunks=None,
                 default_df=None, n_knots=20, degree=3, penalty_order=2,
                 tensor_n_knots=8, learning_rate=0.01, epochs=2000,
                 batch_size=None, early_stopping=False,
                 validation_fraction=0.1, patience=50, orthogonalize=True,
                 seed=0):
        self.formulas = formulas
        self.family = family
        self.trunks = trunks
        self.default_df = default_df
        self.n_knots = n_knots
        self.degree = degree
        self.penalty_order = penalty_order
        self.tensor_n_knots = tensor_n_knots
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.early_stopping = early_stopping
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.orthogonalize = orthogonalize
        self.seed = seed

    # -- internals -----------------------------------------------------
    def _response(self) -> str:
        if not self.formulas:
            raise ValueError("formulas must be a non-empty list of strings")
        return parse_model_formula(self.formulas[0])[0]

    def _config(self) -> FitConfig:
        return FitConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            early_stopping=self.early_stopping,
            validation_fraction=self.validation_fraction,
            patience=self.patience,
            orthogonalize=self.orthogonalize,
            default_df=self.default_df,
            design=DesignConfig(
                n_knots=self.n_knots,
                degree=self.degree,
                penalty_order=self.penalty_order,
                tensor_n_knots=self.tensor_n_knots,
            ),
        )

    def _dataset(self, data, y=None) -> Dataset:
        return Dataset.from_columns(_column_dict(data, y, self._response()))

    # -- estimator API ----------------------------------------------------
    def fit(self, data, y=None):
        """Fit on tabular data containing every feature the formulas name."""
        spec = build_spec(self.formulas, self.family, self.trunks or {})
        self.model_ = engine_fit(spec, self._dataset(data, y), self._config())
        self.diagnostics_ = self.model_.diagnostics
        return self

    def _check_fitted(self) -> FittedModel:
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit() first")
        return self.model_

    def predict(self, data):
        """Predicted distribution parameters, one column per parameter."""
        model = self._check_fitted()
        return model.predict(self._predict_dataset(data)).theta

    def predict_distribution(self, data):
        """Full prediction handle (parameters, quantiles, log-score)."""
        model = self._check_fitted()
        return model.predict(self._predict_dataset(data))

    def predict_quantiles(self, data, probs):
        """Outcome quantiles per row, one column per probability."""
        result = self.predict_distribution(data)
        return np.column_stack([result.quantile(p) for p in probs])

    def _predict_dataset(self, data) -> Dataset:
        cols = _column_dict(data)
        response = self._response()
        if response not in cols:
            # prediction does not need the response; pad so Dataset is happy
            n = len(next(iter(cols.values())))
            cols[response] = np.zeros(n)
        return Dataset.from_columns(cols)

    def score(self, data, y=None):
        """Negative mean held-out NLL (higher is better, sklearn convention)."""
        model = self._check_fitted()
        return -model.log_score(self._dataset(data, y))

    def partial_effect(self, term, grid=None, grid_size=200, parameter=None):
        """Fitted contribution of one structured term; see engine docs."""
        return self._check_fitted().partial_effects(
            term, grid=grid, grid_size=grid_size, parameter=parameter
        )

    def save(self, path):
        self._check_fitted().save(path)

    @classmethod
    def from_file(cls, path) -> "SemiStructuredRegression":
        """Rebuild an estimator around a serialized model (for prediction)."""
        model = FittedModel.load(path)
        echo = model.config_echo
        est = cls(
            formulas=model.spec.render(),
            family=model.spec.family,
            trunks={
                name: {"units": list(ts.units), "activation": ts.activation}
                for name, ts in model.spec.trunks.items()
            },
            default_df=echo.get("default_df"),
            learning_rate=echo.get("learning_rate", 0.01),
            epochs=echo.get("epochs", 2000),
            batch_size=echo.get("batch_size"),
            early_stopping=echo.get("early_stopping", False),
            validation_fraction=echo.get("validation_fraction", 0.1),
            patience=echo.get("patience", 50),
            orthogonalize=echo.get("orthogonalize", True),
            seed=echo.get("seed", 0),
            n_knots=model.design_config.n_knots,
            degree=model.design_config.degree,
            penalty_order=model.design_config.penalty_order,
            tensor_n_knots=model.design_config.tensor_n_knots,
        )
        est.model_ = model
        est.diagnostics_ = model.diagnostics
        return est

"""Feature selection for neural networks on tabular data.

Modules: ``autodiff`` (reverse-mode graphs with double backprop), ``nn``
(MLP training), ``fs`` (selectors), ``trees`` (forest and boosting),
``data`` (loading, splits, extraneous features), ``stats`` (rank tests and
agreement), ``bench`` (random search and reports) and ``cli``.
"""

__version__ = "0.1.0"

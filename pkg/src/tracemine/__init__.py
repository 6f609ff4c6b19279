"""Mining batch-job execution DAGs: encode, cluster, and predict runtimes."""

__version__ = "0.1.0"

"""Row-partitioned CNN inference across a host and secondary edge servers."""

__version__ = "0.1.0"

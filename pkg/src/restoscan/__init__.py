"""Image restoration with channel-grouped multi-directional selective scans."""

__version__ = "0.1.0"

"""Parallel runtime: data server, forwarder tree, workers and the local manager."""

"""End-to-end experiment harness: stream, backbone, estimator, metrics, persistence, CLI."""

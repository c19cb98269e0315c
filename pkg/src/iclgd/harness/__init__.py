"""Command-line experiment harness: configs, runs, CSV/SVG artifacts."""

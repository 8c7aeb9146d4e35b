"""Report bundle assembly: paired CSV + SVG outputs and run manifests."""

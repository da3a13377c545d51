"""Semantic scene-graph registration toolkit.

Pipeline: scene graphs (nodes with labels, boxes, centers, point clouds;
proximity edges) are encoded into layered node features, matched
hierarchically (nodes, then points via optimal transport), and registered
with a robust max-clique / graduated non-convexity pose back-end.  A
two-agent simulator exercises the coarse-to-fine communication protocol
with byte-exact bandwidth accounting.
"""

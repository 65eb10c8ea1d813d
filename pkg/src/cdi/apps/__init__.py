"""Demonstration applications built on the handle API: the frame pipeline
and the decentralized workflow orchestrator."""

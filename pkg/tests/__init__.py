"""Tests for mbfcn-cli."""

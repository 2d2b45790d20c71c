"""Optimal consumption and investment under regime switching."""

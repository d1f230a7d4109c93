"""MCP tools for the EV bHMM toolkit."""

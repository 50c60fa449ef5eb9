#!/usr/bin/env python3
"""Print the tools the MCP server advertises, with their arguments."""

import os
import sys

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from mcp_stdio_server import MCPServer  # noqa: E402

tools = MCPServer().tools

print(f"Total MCP Tools: {len(tools)}")
print("=" * 50)

for i, tool in enumerate(tools, 1):
    arguments = ", ".join(tool["inputSchema"]["properties"]) or "-"
    print(f"{i:2d}. {tool['name']}({arguments})")
    print(f"    {tool['description']}")

"""
Command functions behind the CLI verbs and the MCP tools.

Every ``cmd_*`` function returns a dictionary with ``status`` and
``exit_code`` and never raises.
"""

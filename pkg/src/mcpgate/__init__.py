"""mcpgate: a security gateway for Model Context Protocol deployments.

The gateway sits between an MCP host and its servers and enforces:

-   capability attestation: servers prove their capability classes with
    authority-signed certificates instead of self-asserting them,
-   per-message authentication: HMAC-SHA256 envelopes with timestamp
    freshness and a sliding nonce window for replay protection,
-   origin tagging: sampling traffic is labeled with the server it came
    from so hosts can tell server-injected prompts from user input,
-   flow isolation: cross-server information flow is tracked with taint
    labels and gated by policy or explicit operator consent,
-   downgrade pinning: once a server has authenticated, reconnecting
    without credentials is flagged, never silently accepted.

Alongside the gateway live the `authority` toolchain (issue, revoke and
cross-sign capability certificates) and the `harness` (deterministic
adversarial scenarios that exercise the gateway without a live model).
"""

__version__ = "0.1.0"

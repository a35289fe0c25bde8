import os
import signal
import sys

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ppg2resp.api.cli import main


def signal_handler(signum, frame):
    """Handle shutdown signals; the output-directory lock is released by the running command"""
    print("\nReceived shutdown signal, stopping...", file=sys.stderr)
    # 128 + signal number, as a shell would report it
    sys.exit(128 + signum)


# Register signal handlers
signal.signal(signal.SIGINT, signal_handler)
signal.signal(signal.SIGTERM, signal_handler)

if __name__ == "__main__":
    main()

"""
Run the blindgait command line.
"""
import sys

from dotenv import load_dotenv

from commands import cli_main

# Load environment variables from .env file
load_dotenv()

if __name__ == '__main__':
    sys.exit(cli_main())

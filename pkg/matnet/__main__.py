"""Call the main function when module is executed (e.g. with `python -m matnet`)"""
import sys

from matnet import main

if __name__ == "__main__":
    sys.exit(main.main())

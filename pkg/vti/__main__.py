"""python -m vti"""
from vti.cli import main

if __name__ == "__main__":
    main()

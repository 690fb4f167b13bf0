from threemti.cli import run

run()

from grid_adversary import cli

cli.app()

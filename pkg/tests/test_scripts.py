# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

from unittest.mock import patch

from adabin.scripts import adabin


class TestAdabin:
    @patch("adabin.scripts.cli")
    def test_adabin(self, cli):
        # this reflects how the script is invoked by the Poetry-generated stub
        adabin()
        cli.assert_called_once_with("run_adabin")

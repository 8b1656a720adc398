#!/usr/bin/env python3
# Copyright 2024 otafl Contributors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Over-the-air federated learning: optimizer, simulator and bound checker.

Examples:
    python run_otafl.py optimize --config configs/case1_ridge.env --oracle
    python run_otafl.py train --config configs/case2_ridge.env
    python run_otafl.py bounds --config configs/case2_ridge.env
"""

import sys

from dotenv import load_dotenv

from otafl.cli import main

load_dotenv()


if __name__ == "__main__":
    sys.exit(main())

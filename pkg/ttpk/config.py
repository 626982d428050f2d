# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

version = "0.1.0"

verify_fp = True        # verify outputs are finite after each operator, raises NumericError otherwise
print_ops = False       # if true will print every operator recorded onto a tape

verbose = False

log_interval = 50       # training steps between progress lines / metrics rows

# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

from . model import *

from . puppet import SubjectSpec, PoseSample, sample_subject, sample_pose, forward_kinematics

from . dataset import Frame, SubjectDataset, DataConfig, PoseOutOfBounds
from . dataset import render_frame, build_dataset, split_subjects, save_dataset, load_dataset

from . transformer import AffinityMatrix, tokenize, single_head_attention, multi_head_attention, ffn_block
from . transformer import decoder_forward, affinity, transform_heatmaps, contribution_scores

from . trainer import TrainConfig, PairBatch, train, joint_loss, make_pair_batch, predict
from . trainer import reconstruction_loss, supervised_loss

from . ttp import TTPConfig, TTPTrace, ttp_online, ttp_offline, reinit_if_needed, simulate_video_length

from . metrics import EvalResult, Curve, pck, acc_within_d, improvement_curve, savgol_smooth

from . render import render_visualization, emit_report

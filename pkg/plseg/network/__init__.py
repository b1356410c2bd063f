# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
from plseg.network.kernels import branch_kernel_sizes, derive_boundary, \
    scale_invariant_fuse, transform_kernel
from plseg.network.loss import LossWeights, joint_loss, soft_dice_loss
from plseg.network.tied_net import NetConfig, NetworkInputError, \
    NetworkOutputs, TiedScaleNet, build_model, count_trainable, \
    enumerate_trainable, forward, import_backbone_weights, load_checkpoint, \
    predict_probability, resize_stack, save_checkpoint

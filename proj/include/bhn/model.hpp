#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bhn/nets.hpp"
#include "bhn/tape.hpp"

namespace bhn {

enum class TaskMode { kImage, kVideo };
enum class Group { kExperimental, kControl1, kControl2 };
enum class SimilarityKind { kAbsolute, kCosine };

const char* group_name(Group g);
Group parse_group(const std::string& s);

/// Architecture constants. Image and video defaults are the published
/// configurations; tests shrink the dims.
struct ModelSpec {
    TaskMode mode = TaskMode::kImage;
    Group group = Group::kExperimental;
    int n_units = 64;
    int input_dim = 256;   // patch pixels / stacked window pixels
    int enc_hidden = 128;
    int z_dim = 1;
    int proj_dim = 0;      // video: shared projection output
    int gru_hidden = 0;    // video: aggregator state
    int c_dim = 0;         // video: context output
    int att_hidden = 256;  // dimension of the global a
    double dropout_p = 0.2;

    static ModelSpec image_defaults(Group g = Group::kExperimental);
    static ModelSpec video_defaults(Group g = Group::kExperimental);
};

/// One gradient-isolated unit: an encoder, and for video an aggregator
/// (GRU) with a small head producing the unit context.
struct CortexUnit {
    int index = 0;
    Linear enc_hidden;
    Linear enc_out;
    bool has_aggregator = false;
    GruCell ar;
    Linear ar_head;

    /// Encoder: z = enc_out(leaky_relu(enc_hidden(x))).
    Var encode(Tape& tape, Var x, bool bind);
    /// Aggregator step: h' = gru(x, h), c = head(h'). Inputs are whatever
    /// plays the role of the unit input stream (z, or e during the
    /// working-memory protocol).
    struct ArStep {
        Var h_new;
        Var c;
    };
    ArStep aggregate(Tape& tape, Var input, Var hidden, bool bind);

    std::vector<Parameter*> parameters();
};

struct CortexNetwork {
    ModelSpec spec;
    Linear shared_proj;  // video only
    std::vector<CortexUnit> units;
    Parameter log_T;  // video density-ratio temperature, learned in log space

    /// Image: per-unit z from a patch batch [N x input_dim].
    std::vector<Var> forward_image(Tape& tape, Var patches, bool bind);
    /// Video: per-unit z from a stacked window batch [N x input_dim],
    /// through the shared projection.
    std::vector<Var> encode_video(Tape& tape, Var windows, bool bind);

    std::vector<Parameter*> parameters();  // includes log_T for video
};

/// Encoder-decoder producing the global a and per-unit keys a^i. The
/// image variant narrows by dropping unit inputs; the video variant
/// narrows through the 2-d bottleneck. Control group 2 replaces both
/// maps with per-unit paths so no information crosses units.
struct AttentionNetwork {
    ModelSpec spec;
    Linear enc, dec;
    std::vector<Linear> enc_units, dec_units;  // control2 paths
    Parameter log_tau;
    UnitDropout dropout;

    struct Forward {
        Var a;                  // invalid for control2 (no global representation)
        std::vector<Var> keys;  // per-unit a^i
    };
    /// unit_inputs are detached values by contract: no gradient may reach
    /// the cortex side from here.
    Forward forward(Tape& tape, const std::vector<Tensor>& unit_inputs, Rng& dropout_rng,
                    bool bind);

    Var inv_tau(Tape& tape, bool bind);  // exp(-log_tau), on tape

    std::vector<Parameter*> parameters();
};

/// The paired (keys, representations) batch the weights and contrastive
/// denominators are computed over. One entry per unit; pairs are
/// index-aligned.
struct MemoryPool {
    std::vector<Tensor> keys;  // per unit: [N x key_dim]
    std::vector<Tensor> reps;  // per unit: [N x z_dim]

    int size() const { return keys.empty() ? 0 : keys[0].shape[0]; }
    void validate() const;
};

struct BhnModel {
    ModelSpec spec;
    CortexNetwork cortex;
    std::optional<AttentionNetwork> attention;  // absent for control1

    static BhnModel make(const ModelSpec& spec, std::uint64_t seed);

    std::vector<Parameter*> cortex_parameters();
    std::vector<Parameter*> attention_parameters();
    std::vector<Parameter*> all_parameters();

    void save(const std::string& path);
    void load(const std::string& path);
};

/// Frozen value-only passes used by evaluation, probing and the
/// working-memory protocol. None of these touch gradients.
std::vector<Tensor> encode_video_values(BhnModel& model, const Tensor& window);
void advance_aggregator(BhnModel& model, const std::vector<Tensor>& inputs,
                        const std::vector<Tensor>& hiddens, std::vector<Tensor>* h_out,
                        std::vector<Tensor>* c_out);
struct AttentionValues {
    bool has_a = false;
    Tensor a;
    std::vector<Tensor> keys;
};
AttentionValues attention_values(BhnModel& model, const std::vector<Tensor>& unit_inputs,
                                 Rng& dropout_rng, bool train_mode);

/// Softmax attention weights: row j holds the predicted probability of
/// each pool sample for anchor j.  anchors [N x d], pool_keys [M x d];
/// result [N x M], rows sum to 1.
Tensor attention_weights(const Tensor& anchors, const Tensor& pool_keys, double tau,
                         SimilarityKind kind, int unit_index = -1);

/// On-tape variant used inside training; inv_tau is a scalar var so tau
/// can be learned.
Var attention_weights_on_tape(Tape& tape, Var anchors, Var pool_keys, Var inv_tau,
                              SimilarityKind kind, int unit_index = -1);

/// e = W * Z: attention-weighted average of pool representations.
Tensor expectation(const Tensor& weights, const Tensor& pool_reps);

}  // namespace bhn

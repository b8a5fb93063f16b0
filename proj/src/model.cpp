#include "bhn/model.hpp"

#include <cmath>

#include "bhn/checkpoint.hpp"

namespace bhn {

const char* group_name(Group g) {
    switch (g) {
        case Group::kExperimental: return "experimental";
        case Group::kControl1: return "control1";
        case Group::kControl2: return "control2";
    }
    return "?";
}

Group parse_group(const std::string& s) {
    if (s == "experimental") return Group::kExperimental;
    if (s == "control1") return Group::kControl1;
    if (s == "control2") return Group::kControl2;
    fail("unknown group '" + s + "' (expected experimental|control1|control2)");
}

ModelSpec ModelSpec::image_defaults(Group g) {
    ModelSpec s;
    s.mode = TaskMode::kImage;
    s.group = g;
    s.n_units = 64;
    s.input_dim = 16 * 16;
    s.enc_hidden = 128;
    s.z_dim = 1;
    s.att_hidden = 256;
    s.dropout_p = 0.2;
    return s;
}

ModelSpec ModelSpec::video_defaults(Group g) {
    ModelSpec s;
    s.mode = TaskMode::kVideo;
    s.group = g;
    s.n_units = 16;
    s.input_dim = 4 * 96 * 96;
    s.proj_dim = 512;
    s.enc_hidden = 32;
    s.z_dim = 2;
    s.gru_hidden = 32;
    s.c_dim = 2;
    s.att_hidden = 2;
    s.dropout_p = 0.0;
    return s;
}

Var CortexUnit::encode(Tape& tape, Var x, bool bind) {
    Var h = bind ? enc_hidden.forward(tape, x) : enc_hidden.forward_frozen(tape, x);
    h = tape.leaky_relu(h);
    return bind ? enc_out.forward(tape, h) : enc_out.forward_frozen(tape, h);
}

CortexUnit::ArStep CortexUnit::aggregate(Tape& tape, Var input, Var hidden, bool bind) {
    Var h_new;
    if (bind) {
        h_new = ar.step(tape, input, hidden);
    } else {
        // frozen GRU step: same formulas against constant weights
        auto gate = [&](Parameter& w, Parameter& u, Parameter& b, Var hh) {
            Var s = tape.add(tape.matmul(input, tape.constant(w.value), false, true),
                             tape.matmul(hh, tape.constant(u.value), false, true));
            return tape.add(s, tape.constant(b.value));
        };
        Var r = tape.sigmoid(gate(ar.w_r, ar.u_r, ar.b_r, hidden));
        Var u = tape.sigmoid(gate(ar.w_u, ar.u_u, ar.b_u, hidden));
        Var rh = tape.elementwise_mul(r, hidden);
        Var n = tape.tanh(gate(ar.w_n, ar.u_n, ar.b_n, rh));
        Var keep = tape.add(tape.negate(u), tape.constant(Tensor::scalar(1.0f)));
        h_new = tape.add(tape.elementwise_mul(keep, n), tape.elementwise_mul(u, hidden));
    }
    Var c = bind ? ar_head.forward(tape, h_new) : ar_head.forward_frozen(tape, h_new);
    return {h_new, c};
}

std::vector<Parameter*> CortexUnit::parameters() {
    std::vector<Parameter*> ps;
    for (auto* p : enc_hidden.parameters()) ps.push_back(p);
    for (auto* p : enc_out.parameters()) ps.push_back(p);
    if (has_aggregator) {
        for (auto* p : ar.parameters()) ps.push_back(p);
        for (auto* p : ar_head.parameters()) ps.push_back(p);
    }
    return ps;
}

std::vector<Var> CortexNetwork::forward_image(Tape& tape, Var patches, bool bind) {
    if (tape.shape(patches).back() != spec.input_dim)
        fail("cortex_forward_image: patch width " +
             std::to_string(tape.shape(patches).back()) + " != " +
             std::to_string(spec.input_dim));
    std::vector<Var> zs;
    zs.reserve(units.size());
    for (auto& u : units) zs.push_back(u.encode(tape, patches, bind));
    return zs;
}

std::vector<Var> CortexNetwork::encode_video(Tape& tape, Var windows, bool bind) {
    if (tape.shape(windows).back() != spec.input_dim)
        fail("cortex_forward_video: window width " +
             std::to_string(tape.shape(windows).back()) + " != " +
             std::to_string(spec.input_dim));
    Var feat = bind ? shared_proj.forward(tape, windows)
                    : shared_proj.forward_frozen(tape, windows);
    std::vector<Var> zs;
    zs.reserve(units.size());
    for (auto& u : units) zs.push_back(u.encode(tape, feat, bind));
    return zs;
}

std::vector<Parameter*> CortexNetwork::parameters() {
    std::vector<Parameter*> ps;
    if (spec.mode == TaskMode::kVideo) {
        for (auto* p : shared_proj.parameters()) ps.push_back(p);
        ps.push_back(&log_T);
    }
    for (auto& u : units)
        for (auto* p : u.parameters()) ps.push_back(p);
    return ps;
}

AttentionNetwork::Forward AttentionNetwork::forward(Tape& tape,
                                                    const std::vector<Tensor>& unit_inputs,
                                                    Rng& dropout_rng, bool bind) {
    if (static_cast<int>(unit_inputs.size()) != spec.n_units)
        fail("attention_forward: got " + std::to_string(unit_inputs.size()) + " units, expected " +
             std::to_string(spec.n_units));
    const int key_dim = spec.mode == TaskMode::kImage ? spec.z_dim : spec.c_dim;
    Forward out;
    if (spec.group == Group::kControl2) {
        out.keys.reserve(unit_inputs.size());
        for (int i = 0; i < spec.n_units; ++i) {
            Var x = tape.constant(unit_inputs[static_cast<std::size_t>(i)]);
            Var mid = bind ? enc_units[static_cast<std::size_t>(i)].forward(tape, x)
                           : enc_units[static_cast<std::size_t>(i)].forward_frozen(tape, x);
            out.keys.push_back(bind ? dec_units[static_cast<std::size_t>(i)].forward(tape, mid)
                                    : dec_units[static_cast<std::size_t>(i)].forward_frozen(tape, mid));
        }
        return out;
    }
    std::vector<Tensor> inputs = unit_inputs;
    if (spec.mode == TaskMode::kImage)
        inputs = dropout.apply_values(inputs, dropout_rng);
    // one flat [N x (units*dim)] constant leaf
    const int in_dim = inputs[0].shape.back();
    const int n = inputs[0].shape[0];
    Tensor flat = Tensor::zeros({n, spec.n_units * in_dim});
    for (int i = 0; i < spec.n_units; ++i)
        for (int r = 0; r < n; ++r)
            for (int d = 0; d < in_dim; ++d)
                flat.data[static_cast<std::size_t>(r) * (spec.n_units * in_dim) + i * in_dim + d] =
                    inputs[static_cast<std::size_t>(i)]
                        .data[static_cast<std::size_t>(r) * in_dim + d];
    Var x = tape.constant(std::move(flat));
    Var a = bind ? enc.forward(tape, x) : enc.forward_frozen(tape, x);
    if (spec.mode == TaskMode::kImage) a = tape.leaky_relu(a);
    Var decoded = bind ? dec.forward(tape, a) : dec.forward_frozen(tape, a);
    out.a = a;
    out.keys.reserve(static_cast<std::size_t>(spec.n_units));
    for (int i = 0; i < spec.n_units; ++i)
        out.keys.push_back(tape.slice(decoded, i * key_dim, (i + 1) * key_dim));
    return out;
}

Var AttentionNetwork::inv_tau(Tape& tape, bool bind) {
    Var lt = bind ? tape.param(log_tau) : tape.constant(log_tau.value);
    return tape.exp(tape.negate(lt));
}

std::vector<Parameter*> AttentionNetwork::parameters() {
    std::vector<Parameter*> ps;
    if (spec.group == Group::kControl2) {
        for (auto& l : enc_units)
            for (auto* p : l.parameters()) ps.push_back(p);
        for (auto& l : dec_units)
            for (auto* p : l.parameters()) ps.push_back(p);
    } else {
        for (auto* p : enc.parameters()) ps.push_back(p);
        for (auto* p : dec.parameters()) ps.push_back(p);
    }
    ps.push_back(&log_tau);
    return ps;
}

void MemoryPool::validate() const {
    if (keys.size() != reps.size()) fail("memory pool: key/rep unit counts differ");
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (keys[i].shape[0] != reps[i].shape[0])
            fail("memory pool: unit " + std::to_string(i) + " has " +
                 std::to_string(keys[i].shape[0]) + " keys but " +
                 std::to_string(reps[i].shape[0]) + " representations");
    }
}

BhnModel BhnModel::make(const ModelSpec& spec, std::uint64_t seed) {
    if (spec.mode == TaskMode::kImage && spec.group == Group::kControl2)
        fail("control2 is defined for the video task only");
    BhnModel m;
    m.spec = spec;
    m.cortex.spec = spec;
    Rng rng(derive_seed(seed, "model-init"));
    const bool video = spec.mode == TaskMode::kVideo;
    if (video) {
        m.cortex.shared_proj = Linear("shared", spec.input_dim, spec.proj_dim, true, rng);
        m.cortex.log_T = Parameter("cortex.log_T", Tensor::zeros({1}));  // T = 1
        m.cortex.log_T.decay = false;
    }
    const int enc_in = video ? spec.proj_dim : spec.input_dim;
    for (int i = 0; i < spec.n_units; ++i) {
        CortexUnit u;
        u.index = i;
        const std::string base = "unit" + std::to_string(i);
        u.enc_hidden = Linear(base + ".enc.h", enc_in, spec.enc_hidden, true, rng);
        u.enc_out = Linear(base + ".enc.o", spec.enc_hidden, spec.z_dim, true, rng);
        if (video) {
            u.has_aggregator = true;
            u.ar = GruCell(base + ".ar", spec.z_dim, spec.gru_hidden, rng);
            u.ar_head = Linear(base + ".ar.head", spec.gru_hidden, spec.c_dim, true, rng);
        }
        m.cortex.units.push_back(std::move(u));
    }
    if (spec.group != Group::kControl1) {
        AttentionNetwork att;
        att.spec = spec;
        const int key_dim = video ? spec.c_dim : spec.z_dim;
        const int att_in = spec.n_units * key_dim;
        if (spec.group == Group::kControl2) {
            for (int i = 0; i < spec.n_units; ++i) {
                att.enc_units.push_back(
                    Linear("att.enc.u" + std::to_string(i), key_dim, 1, false, rng));
                att.dec_units.push_back(
                    Linear("att.dec.u" + std::to_string(i), 1, key_dim, false, rng));
            }
        } else if (video) {
            att.enc = Linear("att.enc", att_in, spec.att_hidden, false, rng);
            att.dec = Linear("att.dec", spec.att_hidden, att_in, false, rng);
        } else {
            att.enc = Linear("att.enc", att_in, spec.att_hidden, true, rng);
            att.dec = Linear("att.dec", spec.att_hidden, att_in, true, rng);
        }
        att.log_tau = Parameter("att.log_tau", Tensor::zeros({1}));  // tau = 1
        att.log_tau.decay = false;
        att.dropout = UnitDropout(video ? 0.0 : spec.dropout_p, true);
        m.attention = std::move(att);
    }
    return m;
}

std::vector<Parameter*> BhnModel::cortex_parameters() { return cortex.parameters(); }

std::vector<Parameter*> BhnModel::attention_parameters() {
    return attention ? attention->parameters() : std::vector<Parameter*>{};
}

std::vector<Parameter*> BhnModel::all_parameters() {
    auto ps = cortex_parameters();
    for (auto* p : attention_parameters()) ps.push_back(p);
    return ps;
}

void BhnModel::save(const std::string& path) { save_checkpoint(path, all_parameters()); }
void BhnModel::load(const std::string& path) { load_checkpoint(path, all_parameters()); }

std::vector<Tensor> encode_video_values(BhnModel& model, const Tensor& window) {
    Tape tape;
    auto zs = model.cortex.encode_video(tape, tape.constant(window), false);
    std::vector<Tensor> out;
    out.reserve(zs.size());
    for (Var z : zs) out.push_back(tape.value(z));
    return out;
}

void advance_aggregator(BhnModel& model, const std::vector<Tensor>& inputs,
                        const std::vector<Tensor>& hiddens, std::vector<Tensor>* h_out,
                        std::vector<Tensor>* c_out) {
    const int units = model.spec.n_units;
    if (static_cast<int>(inputs.size()) != units || static_cast<int>(hiddens.size()) != units)
        fail("advance_aggregator: per-unit lists do not match the unit count");
    h_out->clear();
    c_out->clear();
    Tape tape;
    for (int i = 0; i < units; ++i) {
        auto& u = model.cortex.units[static_cast<std::size_t>(i)];
        auto step = u.aggregate(tape, tape.constant(inputs[static_cast<std::size_t>(i)]),
                                tape.constant(hiddens[static_cast<std::size_t>(i)]), false);
        h_out->push_back(tape.value(step.h_new));
        c_out->push_back(tape.value(step.c));
    }
}

AttentionValues attention_values(BhnModel& model, const std::vector<Tensor>& unit_inputs,
                                 Rng& dropout_rng, bool train_mode) {
    AttentionValues out;
    if (!model.attention) fail("attention_values: model has no attention network");
    const bool saved = model.attention->dropout.train;
    model.attention->dropout.train = train_mode;
    Tape tape;
    auto fwd = model.attention->forward(tape, unit_inputs, dropout_rng, false);
    model.attention->dropout.train = saved;
    out.has_a = fwd.a.valid();
    if (out.has_a) out.a = tape.value(fwd.a);
    out.keys.reserve(fwd.keys.size());
    for (Var k : fwd.keys) out.keys.push_back(tape.value(k));
    return out;
}

namespace {

void check_nonzero_rows(const Tensor& t, int unit_index, const char* what) {
    const int d = t.shape.back();
    const int n = t.shape[0];
    for (int r = 0; r < n; ++r) {
        double nrm = 0;
        for (int j = 0; j < d; ++j) {
            const double v = t.data[static_cast<std::size_t>(r) * d + j];
            nrm += v * v;
        }
        if (nrm == 0.0)
            fail(std::string("attention_weights: zero-norm ") + what + " at row " +
                 std::to_string(r) +
                 (unit_index >= 0 ? " (unit " + std::to_string(unit_index) + ")" : ""));
    }
}

}  // namespace

Tensor attention_weights(const Tensor& anchors, const Tensor& pool_keys, double tau,
                         SimilarityKind kind, int unit_index) {
    if (tau <= 0) fail("attention_weights: tau must be positive");
    if (anchors.shape.back() != pool_keys.shape.back())
        fail("attention_weights: key dims differ, " + shape_str(anchors.shape) + " vs " +
             shape_str(pool_keys.shape));
    Tape tape;
    if (kind == SimilarityKind::kCosine) {
        check_nonzero_rows(anchors, unit_index, "anchor");
        check_nonzero_rows(pool_keys, unit_index, "pool key");
    }
    Var a = tape.leaf(anchors);
    Var p = tape.leaf(pool_keys);
    Var inv_tau = tape.constant(Tensor::scalar(static_cast<float>(1.0 / tau)));
    Var w = attention_weights_on_tape(tape, a, p, inv_tau, kind, unit_index);
    return tape.value(w);
}

Var attention_weights_on_tape(Tape& tape, Var anchors, Var pool_keys, Var inv_tau,
                              SimilarityKind kind, int unit_index) {
    const Shape& sa = tape.shape(anchors);
    const Shape& sp = tape.shape(pool_keys);
    const int n = sa[0], m = sp[0], d = sa.back();
    Var sim;
    if (kind == SimilarityKind::kAbsolute) {
        if (d != 1)
            fail("attention_weights: absolute similarity is defined for 1-d keys, got dim " +
                 std::to_string(d));
        Var tiled_a = tape.matmul(anchors, tape.constant(Tensor::full({1, m}, 1.0f)));
        Var tiled_p = tape.matmul(tape.constant(Tensor::full({n, 1}, 1.0f)), pool_keys,
                                  false, true);
        sim = tape.negate(tape.abs(tape.add(tiled_a, tape.negate(tiled_p))));
    } else {
        check_nonzero_rows(tape.value(anchors), unit_index, "anchor");
        check_nonzero_rows(tape.value(pool_keys), unit_index, "pool key");
        auto inv_norm = [&](Var v, int rows) {
            Var sq = tape.elementwise_mul(v, v);
            Var rs = tape.matmul(sq, tape.constant(Tensor::full({d}, 1.0f)));  // [rows]
            Var half = tape.scale(tape.log(rs), -0.5);
            return tape.reshape(tape.exp(half), {rows, 1});
        };
        Var num = tape.matmul(anchors, pool_keys, false, true);            // [n x m]
        Var outer = tape.matmul(inv_norm(anchors, n), inv_norm(pool_keys, m), false, true);
        sim = tape.negate(tape.elementwise_mul(num, outer));
    }
    return tape.softmax_lastdim(tape.elementwise_mul(sim, inv_tau));
}

Tensor expectation(const Tensor& weights, const Tensor& pool_reps) {
    if (weights.shape.back() != pool_reps.shape[0])
        fail("expectation: " + std::to_string(weights.shape.back()) + " weights vs pool of " +
             std::to_string(pool_reps.shape[0]));
    Tape tape;
    Var e = tape.matmul(tape.leaf(weights), tape.leaf(pool_reps));
    return tape.value(e);
}

}  // namespace bhn

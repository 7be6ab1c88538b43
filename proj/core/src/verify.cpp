#include "mlit/verify.hpp"

#include "mlit/gating.hpp"
#include "mlit/mae.hpp"
#include "mlit/model.hpp"
#include "mlit/optim.hpp"

#include <cmath>
#include <sstream>

namespace mlit {

namespace {

const std::vector<double> kGateLogits = {4.4742,  -5.6365, 6.8226, 0.9960,  3.5298, 2.3049,
                                         1.2113,  -1.3946, -2.2414, 0.3925, 1.6676, -1.9253};
const std::vector<double> kSoftmaxK = {0.0872, 0.0, 0.9128, 0.0, 0.7729, 0.2271,
                                       0.0,    0.0, 0.0,    0.2184, 0.7816, 0.0};
const std::vector<double> kPsi = {0.9960, 4.4742, 0.9960, 4.4742, 1.2113,  1.2113,
                                  2.3049, 2.3049, 0.3925, -1.9253, -1.9253, 0.3925};

template <class T>
std::string join(const std::vector<T>& v) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i)
        os << (i ? "," : "") << v[i];
    os << ']';
    return os.str();
}

VerifyCheck matrix_check(std::string name, const std::vector<double>& got, const std::vector<double>& want,
                         double tol) {
    double worst = 0;
    for (std::size_t i = 0; i < want.size(); ++i)
        worst = std::max(worst, std::abs(got[i] - want[i]));
    std::ostringstream os;
    os << "max |diff| " << worst << " (tol " << tol << ")";
    if (worst > tol)
        os << " got " << join(got);
    return {std::move(name), worst <= tol, os.str()};
}

template <class T>
VerifyCheck list_check(std::string name, const std::vector<T>& got, const std::vector<T>& want) {
    const bool ok = got == want;
    return {std::move(name), ok, ok ? join(got) : "got " + join(got) + " want " + join(want)};
}

std::int64_t graph_count(const MLiTConfig& cfg) {
    RngStream init(0);
    const auto enc = build_encoder(cfg, DType::f32, init);
    ParamList params;
    collect_params(params, "encoder", enc);
    return params.numel();
}

} // namespace

std::vector<ParamReference> param_references() {
    return {{"S", 2.36e6, 0.025}, {"XS", 1.21e6, 0.025}, {"XXS", 0.66e6, 0.025}, {"decoder", 0.34e6, 0.06}};
}

DecoderCounts decoder_counts() {
    const auto xxs = mlit_preset("XXS");
    DecoderConfig d = decoder_preset();
    DecoderCounts c{};
    d.separate_pos_embed = false;
    c.without_pos_table = decoder_param_count(d, d.embed, xxs.tokens(), xxs.patch_dim());
    d.separate_pos_embed = true;
    c.with_pos_table = decoder_param_count(d, d.embed, xxs.tokens(), xxs.patch_dim());
    return c;
}

std::vector<VerifyCheck> run_verify(const VerifyOptions& options) {
    std::vector<VerifyCheck> out;
    auto hidden = options.hidden_schedule ? options.hidden_schedule : hidden_size_schedule;

    const Tensor h = Tensor::from_values({3, 4}, kGateLogits, DType::f64);
    out.push_back(matrix_check("softmax_k worked matrix (k=2)", softmax_k(h, 2).to_vector(), kSoftmaxK, 5e-4));
    out.push_back(matrix_check("psi thresholds worked matrix (k=2)", psi_thresholds(h, 2).to_vector(), kPsi, 0.0));

    {
        const auto s = hidden(9, 81, 27);
        const bool ok = s.size() == 9 && s.front() == 81 && s.back() == 27 && s[4] == 54;
        out.push_back({"hidden sizes XXS 81 -> 27, layer 4 = 54", ok, join(s)});
    }
    out.push_back(list_check("hidden sizes XS 96 -> 32", hidden(12, 96, 32),
                             std::vector<std::int64_t>{96, 90, 84, 78, 72, 66, 61, 55, 49, 43, 37, 32}));
    out.push_back(list_check("hidden sizes S 144 -> 72", hidden(15, 144, 72),
                             std::vector<std::int64_t>{144, 138, 133, 128, 123, 118, 113, 108, 102, 97, 92, 87,
                                                       82, 77, 72}));
    out.push_back(list_check("expert counts 9 layers", expert_count_schedule(9), {3, 3, 3, 4, 4, 4, 5, 5, 5}));
    out.push_back(list_check("expert counts 15 layers", expert_count_schedule(15),
                             {3, 3, 3, 3, 3, 4, 4, 4, 4, 4, 5, 5, 5, 5, 5}));

    for (const auto& ref : param_references()) {
        if (ref.name == "decoder") {
            const auto c = decoder_counts();
            const double rel = std::abs(static_cast<double>(c.with_pos_table) - ref.reference) / ref.reference;
            const double rel_plain =
                std::abs(static_cast<double>(c.without_pos_table) - ref.reference) / ref.reference;
            std::ostringstream os;
            os << c.with_pos_table << " with positional table (" << rel * 100 << "% off), "
               << c.without_pos_table << " without (" << rel_plain * 100 << "% off), tol " << ref.tolerance * 100
               << "%";
            out.push_back({"parameter count decoder ~0.34M", rel <= ref.tolerance, os.str()});
            continue;
        }
        MLiTConfig cfg = mlit_preset(ref.name);
        // The closed form is evaluated against the schedule under test.
        std::int64_t closed = cfg.patch_dim() * cfg.embed + cfg.tokens() * cfg.embed + 2 * cfg.embed;
        const auto hs = hidden(cfg.layers, cfg.hidden_first, cfg.hidden_last);
        const auto es = expert_count_schedule(cfg.layers);
        for (int i = 0; i < cfg.layers; ++i) {
            EncoderLayerSpec spec = layer_specs(cfg)[static_cast<std::size_t>(i)];
            spec.hidden = hs[static_cast<std::size_t>(i)];
            spec.experts = es[static_cast<std::size_t>(i)];
            closed += encoder_layer_param_count(spec);
        }
        const auto walked = graph_count(cfg);
        const double rel = std::abs(static_cast<double>(closed) - ref.reference) / ref.reference;
        std::ostringstream os;
        os << "closed form " << closed << ", graph walk " << walked << ", " << rel * 100 << "% from reference";
        out.push_back({"parameter count " + ref.name + " ~" + std::to_string(ref.reference / 1e6).substr(0, 4) + "M",
                       closed == walked && rel <= ref.tolerance, os.str()});
    }

    {
        const double peak = scaled_lr(3e-4, 840);
        std::ostringstream os;
        os.precision(10);
        os << peak;
        out.push_back({"peak learning rate base 3e-4, batch 840", std::abs(peak - 9.84375e-4) < 1e-15, os.str()});
    }
    {
        RngStream s(1);
        const auto plan = random_mask(144, 0.75, s, 4);
        bool ok = true;
        for (std::size_t i = 0; i < plan.batch(); ++i)
            ok = ok && plan.masked[i].size() == 108 && plan.visible[i].size() == 36;
        out.push_back({"masking 0.75 of 144 patches -> 108 masked, 36 visible", ok,
                       std::to_string(plan.masked[0].size()) + " masked"});
    }
    {
        const auto one_hot = cv(Tensor::from_values({4}, {5.0, 0.0, 0.0, 0.0}, DType::f64)).item();
        out.push_back({"CV of one-hot load is sqrt(3)", std::abs(one_hot - std::sqrt(3.0)) < 1e-9,
                       std::to_string(one_hot)});
    }
    return out;
}

} // namespace mlit

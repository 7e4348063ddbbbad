// dmbp: attribution maps, insertion metrics, reinitialization sanity checks
// and model inspection from the command line.
//
// Exit codes: 0 success, 2 bad arguments, 3 load/format/IO failure,
// 4 numeric failure.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dmbp/imaging.hpp"
#include "dmbp/methods.hpp"
#include "dmbp/metrics.hpp"
#include "dmbp/model_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Net = dmbp::NetworkDef<float>;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitArgs = 2;
constexpr int kExitLoad = 3;
constexpr int kExitNumeric = 4;

struct ModelArgs {
    std::string model;
    std::string arch;
};

struct MethodArgs {
    std::size_t iters = dmbp::DmbpConfig{}.iterations;
    double lr = dmbp::DmbpConfig{}.learning_rate;
    std::size_t ig_steps = dmbp::BaselineConfig{}.ig_steps;
    std::size_t sg_samples = dmbp::BaselineConfig{}.sg_samples;
    double sg_noise = dmbp::BaselineConfig{}.sg_noise_fraction;
    std::uint64_t seed = 0;

    dmbp::MethodConfig config() const
    {
        dmbp::MethodConfig c;
        c.dmbp.iterations = iters;
        c.dmbp.learning_rate = lr;
        c.baseline.ig_steps = ig_steps;
        c.baseline.sg_samples = sg_samples;
        c.baseline.sg_noise_fraction = sg_noise;
        c.baseline.seed = seed;
        c.dmbp.validate();
        c.baseline.validate();
        return c;
    }

    json to_json() const
    {
        const dmbp::DmbpConfig d;
        return json{{"iterations", iters},
                    {"learning_rate", lr},
                    {"rmsprop_decay", d.decay},
                    {"rmsprop_epsilon", d.epsilon},
                    {"weight_decay", 0.0},
                    {"ig_steps", ig_steps},
                    {"ig_reference", "zero"},
                    {"sg_samples", sg_samples},
                    {"sg_noise_fraction", sg_noise},
                    {"seed", seed}};
    }
};

void add_model_options(CLI::App& cmd, ModelArgs& m)
{
    cmd.add_option("--model", m.model, "Weight file (DMBPW001)")->required();
    cmd.add_option("--arch", m.arch, "Architecture file (JSON)")->required();
}

void add_method_options(CLI::App& cmd, MethodArgs& a)
{
    cmd.add_option("--iters", a.iters, "DMBP iterations")->capture_default_str();
    cmd.add_option("--lr", a.lr, "DMBP RMSProp learning rate")->capture_default_str();
    cmd.add_option("--ig-steps", a.ig_steps, "Integrated-gradients steps")->capture_default_str();
    cmd.add_option("--sg-samples", a.sg_samples, "SmoothGrad samples")->capture_default_str();
    cmd.add_option("--sg-noise", a.sg_noise, "SmoothGrad noise std as a fraction of the input range")
        ->capture_default_str();
    cmd.add_option("--seed", a.seed, "Seed for noise draws and tie-breaking")->capture_default_str();
}

Net load_model(const ModelArgs& m)
{
    for (const auto& p : {m.model, m.arch})
        if (!fs::exists(p)) throw dmbp::LoadError("no such file: " + p);
    return dmbp::load_network<float>(m.model, m.arch);
}

void require_target(const Net& net, std::size_t target)
{
    if (target >= net.class_count)
        throw dmbp::ArgumentError("target " + std::to_string(target) + " is out of range for "
                                  + std::to_string(net.class_count) + " classes");
}

void write_text_atomic(const fs::path& path, const std::string& text)
{
    dmbp::detail::write_bytes_atomic(path, text.data(), text.size());
}

void write_run_manifest(const fs::path& out_dir, json manifest)
{
    write_text_atomic(out_dir / "run_manifest.json", manifest.dump(2) + "\n");
}

std::string format_double(double v)
{
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

std::string curve_csv(const dmbp::InsertionCurve& c)
{
    std::ostringstream os;
    os << "fraction,probability\n" << std::setprecision(10);
    for (std::size_t i = 0; i < c.fractions.size(); ++i) os << c.fractions[i] << ',' << c.probabilities[i] << '\n';
    return os.str();
}

std::string loss_csv(const std::vector<dmbp::LossRecord>& trace)
{
    std::ostringstream os;
    dmbp::write_loss_trace(os, trace);
    return os.str();
}

dmbp::AttributionMap tagged(dmbp::AttributionMap map, std::uint64_t seed)
{
    map.extra = "seed=" + std::to_string(seed);
    return map;
}

// ---------------------------------------------------------------- attribute

struct AttributeArgs {
    ModelArgs model;
    MethodArgs method_args;
    std::string image;
    std::size_t target = 0;
    std::string method;
    std::string out_dir;
    bool overlay = false;
    std::string loss_trace;
};

int cmd_attribute(const AttributeArgs& a)
{
    const auto method = dmbp::parse_method(a.method);
    const auto cfg = a.method_args.config();
    const auto net = load_model(a.model);
    require_target(net, a.target);
    const auto raw = dmbp::load_raw_image(a.image, net.preprocess);
    const auto x = dmbp::normalize<float>(raw, net.preprocess);
    auto out = dmbp::compute_attribution(net, x, a.target, method, cfg);
    const auto map = tagged(out.map, a.method_args.seed);

    fs::create_directories(a.out_dir);
    const std::string stem =
        fs::path(a.image).stem().string() + "." + a.method + ".t" + std::to_string(a.target);
    const fs::path raw_path = fs::path(a.out_dir) / (stem + ".dmbpa");
    const fs::path png_path = fs::path(a.out_dir) / (stem + ".png");
    dmbp::write_raw(map, raw_path);
    dmbp::render_heatmap(map, png_path, a.overlay ? &raw : nullptr);

    json outputs{{"raw_map", raw_path.string()}, {"heatmap", png_path.string()}};
    if (method == dmbp::Method::dmbp) {
        const fs::path trace_path =
            a.loss_trace.empty() ? fs::path(a.out_dir) / (stem + ".loss.csv") : fs::path(a.loss_trace);
        write_text_atomic(trace_path, loss_csv(out.loss_trace));
        outputs["loss_trace"] = trace_path.string();
    }
    write_run_manifest(a.out_dir, json{{"command", "attribute"},
                                       {"model", a.model.model},
                                       {"arch", a.model.arch},
                                       {"model_id", net.model_id},
                                       {"images", json::array({a.image})},
                                       {"targets", json::array({a.target})},
                                       {"method", a.method},
                                       {"config", a.method_args.to_json()},
                                       {"seed", a.method_args.seed},
                                       {"overlay", a.overlay},
                                       {"out_dir", a.out_dir},
                                       {"outputs", outputs}});
    std::cout << raw_path.string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    ModelArgs model;
    MethodArgs method_args;
    std::string metric;
    std::string manifest;
    std::vector<std::string> methods;
    std::string out_dir;
    std::size_t steps = dmbp::MetricConfig{}.steps;
    double blur_sigma = dmbp::MetricConfig{}.blur_sigma;
    std::size_t workers = 0;
};

struct ManifestEntry {
    fs::path image;
    std::string id;
    std::size_t target = 0;
    std::vector<std::size_t> other_labels;
};

std::vector<ManifestEntry> read_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw dmbp::LoadError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw dmbp::LoadError("manifest does not parse: " + std::string(e.what()));
    }
    if (!j.is_object() || !j.contains("images") || !j["images"].is_array())
        throw dmbp::ArgumentError("manifest must be an object with an \"images\" array");
    std::vector<ManifestEntry> entries;
    for (const auto& e : j["images"]) {
        if (!e.contains("image") || !e.contains("target"))
            throw dmbp::ArgumentError("manifest entry needs \"image\" and \"target\"");
        ManifestEntry m;
        const fs::path p = e["image"].get<std::string>();
        m.image = p.is_absolute() ? p : path.parent_path() / p;
        if (!fs::exists(m.image)) throw dmbp::LoadError("manifest image not found: " + m.image.string());
        m.id = p.stem().string();
        m.target = e["target"].get<std::size_t>();
        if (e.contains("other_labels")) m.other_labels = e["other_labels"].get<std::vector<std::size_t>>();
        entries.push_back(std::move(m));
    }
    if (entries.empty()) throw dmbp::ArgumentError("manifest lists no images");
    return entries;
}

struct ImageResult {
    std::vector<double> auc; // one per method
};

int cmd_evaluate(const EvaluateArgs& a)
{
    if (a.metric != "im" && a.metric != "cim") throw dmbp::ArgumentError("metric must be im or cim");
    std::vector<dmbp::Method> methods;
    for (const auto& m : a.methods) methods.push_back(dmbp::parse_method(m));
    const auto cfg = a.method_args.config();
    dmbp::MetricConfig mcfg;
    mcfg.steps = a.steps;
    mcfg.blur_sigma = a.blur_sigma;
    mcfg.seed = a.method_args.seed;
    mcfg.validate();

    const auto entries = read_manifest(a.manifest);
    const auto net = load_model(a.model);
    for (const auto& e : entries) {
        require_target(net, e.target);
        if (a.metric == "cim" && e.other_labels.empty())
            throw dmbp::ArgumentError("cim needs other_labels for every image (missing for " + e.id + ")");
    }

    const fs::path out_dir = a.out_dir;
    fs::create_directories(out_dir / "curves");

    std::vector<ImageResult> results(entries.size());
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= entries.size()) return;
            try {
                const auto& e = entries[i];
                const auto raw = dmbp::load_raw_image(e.image, net.preprocess);
                const auto x = dmbp::normalize<float>(raw, net.preprocess);
                for (std::size_t k = 0; k < methods.size(); ++k) {
                    const auto map = dmbp::compute_attribution(net, x, e.target, methods[k], cfg).map;
                    const auto curve = a.metric == "im"
                                           ? dmbp::insertion_metric(net, raw, map, e.target, mcfg)
                                           : dmbp::complementary_insertion_metric(net, raw, map, e.target,
                                                                                  e.other_labels, mcfg);
                    results[i].auc.push_back(curve.auc);
                    write_text_atomic(out_dir / "curves" / (e.id + "." + a.methods[k] + "." + a.metric + ".csv"),
                                      curve_csv(curve));
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
                next = entries.size();
                return;
            }
        }
    };
    const std::size_t n_workers =
        std::max<std::size_t>(1, std::min(entries.size(), a.workers ? a.workers : std::thread::hardware_concurrency()));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);

    std::ostringstream summary;
    summary << "image,method,metric,auc\n";
    std::vector<double> mean(methods.size(), 0.0);
    for (std::size_t i = 0; i < entries.size(); ++i)
        for (std::size_t k = 0; k < methods.size(); ++k) {
            summary << entries[i].id << ',' << a.methods[k] << ',' << a.metric << ','
                    << format_double(results[i].auc[k]) << '\n';
            mean[k] += results[i].auc[k];
        }
    json means = json::object();
    for (std::size_t k = 0; k < methods.size(); ++k) {
        mean[k] /= static_cast<double>(entries.size());
        summary << "mean," << a.methods[k] << ',' << a.metric << ',' << format_double(mean[k]) << '\n';
        means[a.methods[k]] = mean[k];
        std::cout << a.methods[k] << ' ' << a.metric << " mean_auc " << format_double(mean[k]) << '\n';
    }
    write_text_atomic(out_dir / ("summary." + a.metric + ".csv"), summary.str());

    json images = json::array(), targets = json::array();
    for (const auto& e : entries) {
        images.push_back(e.image.string());
        targets.push_back(e.target);
    }
    json metric_cfg{{"steps", mcfg.steps},
                    {"blur_sigma", mcfg.blur_sigma},
                    {"blur_half_width", mcfg.half_width()},
                    {"tie_break_seed", mcfg.seed}};
    write_run_manifest(out_dir, json{{"command", "evaluate"},
                                     {"metric", a.metric},
                                     {"model", a.model.model},
                                     {"arch", a.model.arch},
                                     {"model_id", net.model_id},
                                     {"manifest", a.manifest},
                                     {"images", images},
                                     {"targets", targets},
                                     {"methods", a.methods},
                                     {"config", a.method_args.to_json()},
                                     {"metric_config", metric_cfg},
                                     {"seed", a.method_args.seed},
                                     {"out_dir", a.out_dir},
                                     {"mean_auc", means}});
    return kExitOk;
}

// ---------------------------------------------------------------- sanity

struct SanityArgs {
    ModelArgs model;
    MethodArgs method_args;
    std::string image;
    std::size_t target = 0;
    std::string method;
    std::string out_dir;
};

int cmd_sanity(const SanityArgs& a)
{
    const auto method = dmbp::parse_method(a.method);
    const auto cfg = a.method_args.config();
    const auto net = load_model(a.model);
    require_target(net, a.target);
    const auto x = dmbp::normalize<float>(dmbp::load_raw_image(a.image, net.preprocess), net.preprocess);
    const auto r = dmbp::reinit_sanity_check(net, x, a.target, method, a.method_args.seed, cfg);

    if (!a.out_dir.empty()) {
        fs::create_directories(a.out_dir);
        const std::string stem = fs::path(a.image).stem().string() + "." + a.method + ".t" + std::to_string(a.target);
        auto original = tagged(r.original, a.method_args.seed);
        auto reinit = tagged(r.reinitialized, a.method_args.seed);
        reinit.extra += ";reinitialized=classifier";
        dmbp::write_raw(original, fs::path(a.out_dir) / (stem + ".original.dmbpa"));
        dmbp::write_raw(reinit, fs::path(a.out_dir) / (stem + ".reinit.dmbpa"));
        dmbp::render_heatmap(original, fs::path(a.out_dir) / (stem + ".original.png"));
        dmbp::render_heatmap(reinit, fs::path(a.out_dir) / (stem + ".reinit.png"));
        write_run_manifest(a.out_dir, json{{"command", "sanity"},
                                           {"model", a.model.model},
                                           {"arch", a.model.arch},
                                           {"model_id", net.model_id},
                                           {"images", json::array({a.image})},
                                           {"targets", json::array({a.target})},
                                           {"method", a.method},
                                           {"config", a.method_args.to_json()},
                                           {"seed", a.method_args.seed},
                                           {"out_dir", a.out_dir},
                                           {"spearman", r.correlation}});
    }
    std::cout << "spearman " << format_double(r.correlation) << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
    ModelArgs model;
    std::string export_manifest;
};

std::string describe(const dmbp::LayerSpec<float>& l)
{
    std::string s = dmbp::to_string(l.kind);
    if (l.kind == dmbp::LayerKind::conv2d)
        s += " " + std::to_string(l.weight.extent(2)) + "x" + std::to_string(l.weight.extent(3)) + "/s"
             + std::to_string(l.conv.stride_h) + "/p" + std::to_string(l.conv.pad_h);
    if (l.kind == dmbp::LayerKind::residual_block)
        s += l.projection.empty() ? " (identity skip)" : " (projection skip)";
    return s;
}

int cmd_inspect(const InspectArgs& a)
{
    const auto net = load_model(a.model);
    std::ifstream arch_in(a.model.arch);
    const auto arch = nlohmann::json::parse(arch_in);
    std::size_t bn_count = 0;
    auto count_bn = [&](const nlohmann::json& layers, auto&& self) -> void {
        for (const auto& l : layers) {
            if (l.value("kind", "") == "batchnorm") ++bn_count;
            if (l.contains("main")) self(l["main"], self);
            if (l.contains("projection")) self(l["projection"], self);
        }
    };
    count_bn(arch["layers"], count_bn);

    std::cout << "model " << net.model_id << "  input " << dmbp::shape_str(net.input_shape) << "  classes "
              << net.class_count << '\n';
    std::cout << std::left << std::setw(6) << "index" << std::setw(34) << "kind" << std::setw(16) << "input"
              << std::setw(16) << "output" << "params\n";
    for (const auto& l : net.layers)
        std::cout << std::left << std::setw(6) << l.source_index << std::setw(34) << describe(l) << std::setw(16)
                  << dmbp::shape_str(l.in_shape) << std::setw(16) << dmbp::shape_str(l.out_shape)
                  << l.parameter_count() << '\n';
    std::cout << "parameters " << net.parameter_count() << '\n';
    std::cout << "batchnorm layers fused " << bn_count << '\n';
    std::cout << "relu sites " << net.site_count() << '\n';

    // End-to-end shape check with a real forward pass.
    const auto trace = dmbp::forward(net, dmbp::Tensor<float>(net.input_shape));
    if (trace.logits.size() != net.class_count)
        throw dmbp::NumericError("forward pass produced " + std::to_string(trace.logits.size()) + " logits");
    std::cout << "shape propagation ok\n";

    if (!a.export_manifest.empty()) {
        std::ifstream in(a.export_manifest);
        if (!in) throw dmbp::LoadError("cannot open export manifest " + a.export_manifest);
        const auto em = nlohmann::json::parse(in);
        std::size_t checked = 0;
        for (const auto& entry : em.at("layer_shapes")) {
            const int index = entry.at("index").get<int>();
            const auto expected = entry.at("output_shape").get<dmbp::Shape>();
            // A fused batch-norm reports the shape of the layer that absorbed it.
            const dmbp::LayerSpec<float>* owner = nullptr;
            for (const auto& l : net.layers)
                if (l.source_index <= index) owner = &l;
            if (!owner) throw dmbp::LoadError("export manifest names unknown layer", index);
            if (owner->out_shape != expected)
                throw dmbp::LoadError("output shape " + dmbp::shape_str(owner->out_shape)
                                          + " differs from exporter record " + dmbp::shape_str(expected),
                                      index);
            ++checked;
        }
        std::cout << "export manifest shapes match (" << checked << " layers)\n";
    }
    return kExitOk;
}

template <typename F>
int guarded(F&& body)
{
    try {
        return body();
    } catch (const dmbp::ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitArgs;
    } catch (const dmbp::DimensionError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitArgs;
    } catch (const dmbp::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const dmbp::Error& e) {
        std::cerr << "load failure: " << e.what() << '\n';
        return kExitLoad;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "load failure: " << e.what() << '\n';
        return kExitLoad;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "io failure: " << e.what() << '\n';
        return kExitLoad;
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"DMBP attribution toolkit"};
    app.require_subcommand(1);

    const std::vector<std::string> method_names{"dmbp", "grad", "ig", "sg"};

    AttributeArgs attr;
    auto* c_attr = app.add_subcommand("attribute", "Compute one attribution map");
    add_model_options(*c_attr, attr.model);
    add_method_options(*c_attr, attr.method_args);
    c_attr->add_option("--image", attr.image, "Input image (PNG or PPM)")->required()->check(CLI::ExistingFile);
    c_attr->add_option("--target", attr.target, "Target class index")->required();
    c_attr->add_option("--method", attr.method, "dmbp, grad, ig or sg")->required()->check(CLI::IsMember(method_names));
    c_attr->add_option("--out-dir", attr.out_dir, "Output directory")->required();
    c_attr->add_flag("--overlay", attr.overlay, "Blend the heatmap over the input image");
    c_attr->add_option("--loss-trace", attr.loss_trace, "Loss-trace CSV path (dmbp; default in --out-dir)");

    EvaluateArgs eval;
    auto* c_eval = app.add_subcommand("evaluate", "Insertion metrics over an image manifest");
    add_model_options(*c_eval, eval.model);
    add_method_options(*c_eval, eval.method_args);
    c_eval->add_option("--metric", eval.metric, "im or cim")->required()->check(CLI::IsMember({"im", "cim"}));
    c_eval->add_option("--manifest", eval.manifest, "JSON manifest {\"images\": [{image, target, other_labels}]}")
        ->required();
    c_eval->add_option("--method", eval.methods, "One or more of dmbp, grad, ig, sg")
        ->required()
        ->delimiter(',')
        ->check(CLI::IsMember(method_names));
    c_eval->add_option("--out-dir", eval.out_dir, "Output directory")->required();
    c_eval->add_option("--steps", eval.steps, "Insertion steps")->capture_default_str();
    c_eval->add_option("--blur-sigma", eval.blur_sigma, "Baseline blur sigma in pixels")->capture_default_str();
    c_eval->add_option("--workers", eval.workers, "Worker threads (0 = logical cores)")->capture_default_str();

    SanityArgs san;
    auto* c_san = app.add_subcommand("sanity", "Classifier-reinitialization rank correlation");
    add_model_options(*c_san, san.model);
    add_method_options(*c_san, san.method_args);
    c_san->add_option("--image", san.image, "Input image (PNG or PPM)")->required()->check(CLI::ExistingFile);
    c_san->add_option("--target", san.target, "Target class index")->required();
    c_san->add_option("--method", san.method, "dmbp, grad, ig or sg")->required()->check(CLI::IsMember(method_names));
    c_san->add_option("--out-dir", san.out_dir, "Where to write both maps");

    InspectArgs insp;
    auto* c_insp = app.add_subcommand("inspect", "Print the layer table and validate shapes");
    add_model_options(*c_insp, insp.model);
    c_insp->add_option("--export-manifest", insp.export_manifest, "Compare shapes with an exporter manifest");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n";
        const CLI::App* failed = &app;
        for (auto* sub : {c_attr, c_eval, c_san, c_insp})
            if (sub->parsed()) failed = sub;
        std::cerr << failed->help();
        return kExitArgs;
    }

    if (c_attr->parsed()) return guarded([&] { return cmd_attribute(attr); });
    if (c_eval->parsed()) return guarded([&] { return cmd_evaluate(eval); });
    if (c_san->parsed()) return guarded([&] { return cmd_sanity(san); });
    return guarded([&] { return cmd_inspect(insp); });
}
